"""Integrator convergence check: rerun the estimate-feedback case at half the step cap."""

from dataclasses import replace

import numpy as np

from gaspurity.plant_model import PlantParams
from gaspurity.scenario import OperatingPoint, commission, paper_configs, run


def main():
    pp, op = PlantParams(), OperatingPoint()
    _, settings = commission(pp, op)
    cfg = paper_configs(pp, op)["estimate feedback"]
    ref = run(cfg, pp, settings)
    half = run(replace(cfg, integrator=replace(cfg.integrator, max_step=0.05)), pp, settings)
    rel = np.max(np.abs(half.records.hto / ref.records.hto - 1))
    print(f"t_OOB at max_step 0.1 s:  {ref.t_oob_per_event}")
    print(f"t_OOB at max_step 0.05 s: {half.t_oob_per_event}")
    print(f"largest relative HTO change: {rel:.2e}")
    print(f"accepted steps: {ref.integrator_steps} vs {half.integrator_steps}")


if __name__ == "__main__":
    main()
