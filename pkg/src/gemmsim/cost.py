"""Development-time estimates for three design loops.

* simulate-mostly: #sim iterations compile and run in simulation, #synth
  iterations go through synthesis and hardware runs;
* synthesis-only: every iteration is synthesized;
* full-simulation-only: every iteration is simulated.

Durations are plain seconds.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class CostModelParams:
    num_sim: float = 0
    num_synth: float = 0
    compile_time: float = 0.0
    sim_inference_time: float = 0.0
    synth_time: float = 0.0
    hw_inference_time: float = 0.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise CostError(f"{k} must be non-negative, got {v}")

    @property
    def sim_iteration(self) -> float:
        return self.compile_time + self.sim_inference_time

    @property
    def synth_iteration(self) -> float:
        return self.synth_time + self.hw_inference_time


def et_secda(p: CostModelParams) -> float:
    return p.num_sim * p.sim_iteration + p.num_synth * p.synth_iteration


def et_synth_only(p: CostModelParams) -> float:
    return (p.num_sim + p.num_synth) * p.synth_iteration


def et_fullsim_only(p: CostModelParams) -> float:
    return (p.num_sim + p.num_synth) * p.sim_iteration


def _ratio(a: float, b: float):
    """a / b, or None when b is zero (an undefined ratio, not infinity)."""
    return a / b if b else None


def cost_summary(p: CostModelParams) -> dict:
    secda, synth, fullsim = et_secda(p), et_synth_only(p), et_fullsim_only(p)
    return {
        "params": asdict(p),
        "et_secda": secda,
        "et_synth_only": synth,
        "et_fullsim_only": fullsim,
        "ratios": {
            "synth_only_over_secda": _ratio(synth, secda),
            "fullsim_only_over_secda": _ratio(fullsim, secda),
            "synth_only_over_fullsim_only": _ratio(synth, fullsim),
            # how much faster a compile is than a synthesis pass
            "synth_time_over_compile_time": _ratio(p.synth_time, p.compile_time),
            # full iteration cost, synthesis loop vs simulation loop
            "synth_iteration_over_sim_iteration": _ratio(p.synth_iteration, p.sim_iteration),
        },
    }
