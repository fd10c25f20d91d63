# %% [markdown]
# One trigger, end to end
#
# Train a small victim, plant the `dot` backdoor, model the trigger
# distribution from the defender's images alone, then retrain with sampled
# triggers and compare against a single pixel-space reversal. Uses the
# default config with a smaller dataset; expect roughly five minutes on one core.

# %%
import numpy as np

from backdoor_mesa import pipeline
from backdoor_mesa.config import RunConfig
from backdoor_mesa.testbed import measure_asr

cfg = RunConfig().override({"data.n_train": 2000, "data.n_test": 1000})
train, test = pipeline.make_data(cfg)
images, evalset = pipeline.defender_split(cfg, test)
entry = next(e for e in pipeline.make_catalog(cfg, train) if e.name == "dot")
print(len(train), "train /", len(images), "defender /", len(evalset), "held out")

# %%
victim, vrep = pipeline.fit_victim(cfg, train, test)
model, arep = pipeline.attack(cfg, victim, train, test, entry)
print(f"victim acc {vrep.clean_accuracy:.3f}  backdoored acc {arep.clean_accuracy:.3f}  ASR {arep.asr:.3f}")

# %% [markdown]
# Three sub-models at thresholds 0.5 / 0.8 / 0.9, mixed 4:3:3.
# Inactive sub-models (mean F below their threshold) get zero weight.

# %%
spec = pipeline.attack_spec(cfg, entry)
ens = pipeline.model_triggers(cfg, model, images, spec.target, entry.name)
for s, w in zip(ens.submodels, ens.weights):
    print(f"beta {s.beta:.2f}  active {s.active}  mean F {s.mean_F:.3f}  MI {s.mi_estimate:.3f}  weight {w:.2f}")

# sampled triggers should fire the backdoor too
draws = ens.sample(8, np.random.default_rng(0)).reshape(8, *entry.trigger.shape)
print("ASR of sampled triggers:", [round(measure_asr(model, evalset, t, spec.target), 2) for t in draws])

# %%
rows = pipeline.defend(cfg, model, ens, spec, images, evalset)
rows.append(pipeline.ideal(cfg, model, spec, images, evalset))
base, _ = pipeline.baseline(cfg, model, spec, images, evalset)
for r in rows + base[:3]:
    print(f"{r.variant:12s} ASR {r.asr_before:.3f} -> {r.asr_after:.3f}   acc {r.acc_before:.3f} -> {r.acc_after:.3f}")
