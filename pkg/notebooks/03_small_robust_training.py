# %% [markdown]
# # Vanilla vs gated training on a small MNIST slice
#
# A shrunken version of the desk profile (600 training digits, 2 epochs,
# 200 test digits) so the whole script runs in a few minutes. The desk
# configs in `configs/` run the full-size version through the CLI.

# %%
import logging

from gbnlab.attacks import Norm
from gbnlab.data import load_mnist
from gbnlab.train import TrainConfig, build_model, desk_suite, evaluate, train

logging.basicConfig(level=logging.INFO, format="%(message)s")
train_set, test_set = load_mnist("data/mnist5k", 600, 200)
suite = desk_suite(iterations=10, mi_iterations=5)

# %%
reports = {}
for defense, extra in (("vanilla", {}), ("gbn", {"gate_learning_rate": 0.03})):
    cfg = TrainConfig(epochs=2, defense=defense, **extra)
    model = build_model(cfg)
    train(model, train_set, cfg)
    gate_domains = {1: Norm.L1, 2: Norm.L2, 3: Norm.LINF} if model.gates else None
    reports[defense] = evaluate(model, test_set, suite, gate_domains=gate_domains)
    print(f"\n{defense}\n{reports[defense].table()}")

# %% [markdown]
# Per-attack accuracies; the per-type rows above are the minimum over the
# attacks of that norm, and "All attacks" counts a digit only if it
# survives every attack.

# %%
for defense, rep in reports.items():
    print(defense, {k: round(v, 3) for k, v in rep.per_attack_accuracy.items()})

# %% [markdown]
# How often does the first gate name the right domain?

# %%
for layer, per_domain in reports["gbn"].gate_accuracy_per_layer.items():
    print(f"gate {layer}:", {k: round(v, 2) for k, v in per_domain.items()})
