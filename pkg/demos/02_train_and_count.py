"""
Training a small C-FCRN+Aux and counting
=========================================

A narrow network trained briefly on synthetic data. The point is the
workflow, not the accuracy: full-size training takes thousands of epochs.
"""

import tempfile
from pathlib import Path

from cfcrn import fileio
from cfcrn.experiments import evaluate_model, samples_from_images
from cfcrn.model import build_params
from cfcrn.synthetic import SyntheticSpec, generate_synthetic
from cfcrn.trainer import TrainConfig, train

data = generate_synthetic(SyntheticSpec(n_images=10, dims=(64, 64), count_range=(10, 25), seed=1))
samples = samples_from_images(data)
train_set, val_set = samples[:8], samples[8:]

# width 0.25 keeps this to a few seconds per epoch on a laptop CPU
params = build_params("cfcrn", seed=0, aux=True, width=0.25)
cfg = TrainConfig(lr=1e-3, batch_size=8, epochs=30, patches_per_image=2, patch_size=32, val_every=10)

run_dir = Path(tempfile.mkdtemp(prefix="cfcrn-demo-"))
state = train(params, train_set, cfg, val_data=val_set, run_dir=run_dir)
for rec in state.history[9::10]:
    print(f"epoch {rec['epoch']:3d}  train L_cmb {rec['train_lcmb']:9.1f}  val L {rec['val_l']:9.1f}")

# the aux heads are training-only; inference runs the main network
report = evaluate_model(params, val_set)
for iid, truth, pred in report.per_image:
    print(f"{iid}: true {truth:.0f}  predicted {pred:.1f}")
print(report.summary_line())

# checkpoints reload with their architecture
again = fileio.load_checkpoint(run_dir / "final.dckp")
print("reloaded", again.arch, "aux" if again.has_aux else "no aux", again.num_parameters(), "parameters")
