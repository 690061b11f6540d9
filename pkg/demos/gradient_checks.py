"""Show the finite-difference oracles at work, then break something.

Runs the layer / lattice / end-to-end gradient checks, prints their margins,
and demonstrates that the harness actually bites by feeding it a backward
pass with a deliberately flipped sign.
"""
from metactc import selfcheck
from metactc.diffcore import backward_layer

for check in (
    selfcheck.check_layer_gradients,
    selfcheck.check_lattice_gradients,
    selfcheck.check_end_to_end_gradients,
):
    print(check().line())


# sabotage: scale the input gradient and watch the same check fail
def flipped(spec, params, cache, grad_out):
    grad_x, grad_params = backward_layer(spec, params, cache, grad_out)
    return -grad_x, grad_params


print()
print("with a sign-flipped input gradient:")
print(selfcheck.check_layer_gradients(instances_per_kind=3, backward_fn=flipped).line())
