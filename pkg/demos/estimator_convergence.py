"""How fast the filter recovers the stack inflows from a wrong initial guess."""

import argparse

import numpy as np

from gaspurity.estimator import initialize
from gaspurity.plant_model import PlantParams
from gaspurity.scenario import Mode, OperatingPoint, ScenarioConfig, commission, run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--offset", type=float, default=0.2, help="relative inflow error at t = 0")
    ap.add_argument("--duration", type=float, default=180.0, help="s")
    args = ap.parse_args()

    pp, op = PlantParams(), OperatingPoint()
    _, settings = commission(pp, op)
    est, _ = initialize(pp, op.inputs(), op.p_sp, op.level_sp)
    x0 = est.x_hat.copy()
    x0[4:] *= 1 + args.offset
    cfg = ScenarioConfig(duration=args.duration, mode=Mode.OPEN_LOOP,
                         meas_noise_std=(0.0, 0.0, 0.0, 0.0), operating_point=op)
    rec = run(cfg, pp, settings, x0_override=x0).records
    err = np.abs(rec.x_hat[:, 4:] / est.x_hat[4:] - 1)
    print("   t [s]   H2 inflow err   O2 inflow err")
    for t in (0, 5, 10, 20, 30, 60, 90, 120, 180):
        if t <= args.duration:
            k = int(round(t / cfg.sample_period))
            print(f"{t:8.0f}   {err[k, 0]:13.2e}   {err[k, 1]:13.2e}")


if __name__ == "__main__":
    main()
