"""End-to-end incremental run plus the storage accounting table.

Uses the reference config with shorter schedules so the demo finishes in
well under a minute; pass --full to run the exact reference benchmark.
"""

import sys
import tempfile

from advreplay import config as CFG
from advreplay import runner

overrides = []
if "--full" not in sys.argv:
    overrides = ["optim.epochs_initial=10", "optim.epochs_incremental=10",
                 "attack.n_attack=4", "adc.transfer_epochs=100"]

cfg = CFG.load_config(overrides=overrides)
out = tempfile.mkdtemp(prefix="advreplay_demo_")
cfg = CFG.apply_override(cfg, f'output.dir="{out}"')

print(f"running {cfg['tasks']['count']}-task cold start on "
      f"{cfg['dataset']['n_classes']} synthetic classes ...")
result = runner.run_benchmark(cfg)

print(f"\nrun artifacts in {result.run_dir}\n")
print(f"{'classifier':<14} {'A_inc':>8} {'A_last':>8}")
for name, row in result.summary.items():
    print(f"{name:<14} {row['A_inc']:8.4f} {row['A_last']:8.4f}")

print("\nper-task accuracy rows (NCM):")
for k, row in enumerate(result.accuracy["ncm"].accuracy):
    cells = " ".join(f"{v:.3f}" for v in row)
    print(f"  after task {k}: {cells}")

print("\ntuned shrinkage per task:", [g for g in result.gammas])

n_old = cfg["dataset"]["n_classes"] - cfg["dataset"]["n_classes"] // cfg["tasks"]["count"]
report = runner.storage_report(
    n_old_classes=n_old,
    feature_dim=cfg["model"]["feature_dim"],
    n_candidates_per_class=cfg["replay"]["k"],
    n_task_samples=cfg["dataset"]["n_train"] * (cfg["dataset"]["n_classes"]
                                                // cfg["tasks"]["count"]),
    svd_k=cfg["covariance"]["svd_k"],
)
print("\nstorage accounting at the final task:")
print(runner.format_storage_table(report))
