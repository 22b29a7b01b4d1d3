"""Grid search over the synthetic-data noise scale.

Prints, per overlap value, the test accuracy of a linear probe, the default
teacher and the default student trained with plain cross-entropy.
"""

import sys
import time
from dataclasses import replace

from dtkd.harness import DataConfig, ExperimentConfig, train_teacher


def main(overlaps, epochs=60):
    for ov in overlaps:
        cfg = ExperimentConfig(data=DataConfig(overlap=ov))
        cfg = replace(cfg, schedule=replace(cfg.schedule, epochs=epochs, warmup_epochs=10,
                                            decay_milestones=(35, 45, 55) if epochs == 60 else (75, 90, 105)))
        data = cfg.data.load()
        row = [f"overlap={ov:g}"]
        for name, hidden in (("linear", ()), ("teacher", cfg.teacher_hidden), ("student", cfg.student_hidden)):
            t0 = time.time()
            _, recs = train_teacher(replace(cfg, teacher_hidden=hidden), data=data)
            row.append(f"{name}={recs[-1].test_accuracy:.3f} ({time.time() - t0:.1f}s)")
        print("  ".join(row), flush=True)


if __name__ == "__main__":
    main([float(v) for v in sys.argv[1:]] or [0.8, 1.0, 1.2, 1.4])
