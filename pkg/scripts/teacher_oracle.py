"""Gaussian check: teacher against the exact velocity field, then CCD trajectory preservation.

    python scripts/teacher_oracle.py --seed 0
"""

import argparse
import time

from flowdistill import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--teacher-iters", type=int, default=20000)
    ap.add_argument("--ccd-iters", type=int, default=5000)
    args = ap.parse_args()
    cfg = ex.GaussianStudyConfig(seed=args.seed)
    cfg.teacher.iters = args.teacher_iters
    cfg.ccd.total_iters = args.ccd_iters
    cfg.ccd.warmup_H = min(cfg.ccd.warmup_H, args.ccd_iters)
    t0 = time.perf_counter()
    s = ex.trajectory_study(cfg)
    print(f"teacher grid MSE vs exact field   {s['oracle_mse']:.4f}")
    print(f"1-step deviation  teacher {s['teacher_1step_deviation']:.4f}  "
          f"student {s['student_1step_deviation']:.4f}  "
          f"ratio {s['student_1step_deviation'] / s['teacher_1step_deviation']:.3f}")
    print(f"defect (0.3, 0.9) before {s['defect_init']:.4f}  after {s['defect_final']:.4f}  "
          f"ratio {s['defect_final'] / s['defect_init']:.3f}")
    print(f"{time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
