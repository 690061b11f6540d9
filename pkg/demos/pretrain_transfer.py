"""Miniature end-to-end transfer experiment (about a minute).

Pretrains a shared encoder on four source languages under both regimes,
then fine-tunes each result, plus an untrained baseline, on a held-out
language's limited split.  Scale is cut way down from the defaults, so the
exact numbers wobble; the point is the workflow and the usual ordering
pretrained < from-scratch.
"""
import tempfile

from metactc import metatrain, tasks
from metactc import model as model_mod

cfg = tasks.default_family_config(
    n_languages=5,
    alphabet_sizes=(5, 6, 7, 6, 5),
    language_ids=("s1", "s2", "s3", "s4", "hold"),
    utterances_per_language=120,
    test_utterances=40,
)
family = tasks.generate_family(cfg)
sources, target = family[:4], family[4]
enc = model_mod.default_encoder_config(feature_dim=cfg.feature_dim)
alphabets = {t.language_id: t.alphabet for t in sources}
episode = metatrain.EpisodeConfig()
STEPS = 300

results = {}
for regime in metatrain.REGIMES:
    start = model_mod.init_model(enc, alphabets, seed=0)
    ckpts, log = metatrain.pretrain(
        start, sources, regime, episode,
        total_steps=STEPS, checkpoint_every=STEPS,
        out_dir=tempfile.mkdtemp(prefix=f"demo_{regime}_"),
        seed=0,
    )
    pretrained, _ = model_mod.load_model(ckpts[-1][1])
    first, last = log.records[0], log.records[-1]
    print(f"{regime:5s} pretraining loss: step 1 {first.meta_loss:.2f} "
          f"-> step {last.step} {last.meta_loss:.2f}")
    results[regime] = pretrained

results["none"] = model_mod.init_model(enc, {}, seed=0)

print(f"\nfine-tuning on {target.language_id!r} "
      f"({len(target.limited_split)} limited utterances), greedy test CER:")
for name, base in results.items():
    m = model_mod.ensure_head(base, target.language_id, target.alphabet, seed=0)
    tuned = metatrain.finetune(
        m, target, metatrain.FinetuneConfig(epochs=10, seed=0), split="limited"
    )
    cer, rows = metatrain.evaluate_task(tuned.model, target, split="test", beam=1)
    print(f"  {name:5s}: CER {cer:.2f}")

uid, ref, hyp = rows[0]
print(f"\nsample decode ({uid}): ref {ref!r} hyp {hyp!r}")
