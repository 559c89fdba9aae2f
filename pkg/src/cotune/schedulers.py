"""Learning-rate strategies for the encoder (S) and adapter (T).

``coordinated`` keeps a moving average of the balance coefficient over the
last ``n_kappa`` steps and, every ``period`` steps, splits the budget
``alpha / gamma`` between the two components so that lr_S / lr_T equals the
averaged coefficient. The remaining strategies are fixed-rate or
coordinate-descent baselines.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .errors import ConfigError
from .metrics import KAPPA_MAX, KAPPA_MIN, BalanceRecord

STRATEGIES = ("constant", "language-up", "vision-up", "feature-cd", "language-cd", "coordinated")


class SchedulerConfigError(ConfigError):
    pass


@dataclass
class SchedulerConfig:
    strategy: str = "constant"
    base_lr_S: float = 1e-4
    base_lr_T: float = 1e-4
    up_lr: float = 1e-3
    alpha: float = 1e-4
    gamma: float = 0.5
    n_kappa: int = 8
    period: int = 10
    kappa_feed: str = "every-step"  # or "refresh-only"
    cd_threshold: float = 1e-6
    cd_patience: int = 20
    cd_max_phase: int = 1000  # 0 disables the fallback switch
    kappa_min: float = KAPPA_MIN
    kappa_max: float = KAPPA_MAX

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise SchedulerConfigError(f"unknown strategy {self.strategy!r}")
        if min(self.base_lr_S, self.base_lr_T, self.up_lr, self.alpha) <= 0:
            raise SchedulerConfigError("learning rates and alpha must be positive")
        if not 0 < self.gamma < 1:
            raise SchedulerConfigError("gamma must lie in (0, 1)")
        if self.n_kappa < 1 or self.period < 1:
            raise SchedulerConfigError("n_kappa and period must be >= 1")
        if self.kappa_feed not in ("every-step", "refresh-only"):
            raise SchedulerConfigError(f"unknown kappa_feed {self.kappa_feed!r}")


def coordinated_rates(kappa_ma: float, alpha: float, gamma: float,
                      kappa_min: float = KAPPA_MIN, kappa_max: float = KAPPA_MAX) -> tuple[float, float]:
    """(beta_T, beta_S) = (alpha / (gamma (k + 1)), alpha / (gamma (1/k + 1)))."""
    if not kappa_min <= kappa_ma <= kappa_max:
        raise SchedulerConfigError(f"kappa_ma {kappa_ma} outside [{kappa_min}, {kappa_max}]")
    if alpha <= 0 or not 0 < gamma < 1:
        raise SchedulerConfigError("need alpha > 0 and 0 < gamma < 1")
    return alpha / (gamma * (kappa_ma + 1.0)), alpha / (gamma * (1.0 / kappa_ma + 1.0))


@dataclass
class SchedulerState:
    config: SchedulerConfig
    buffer: deque = field(default_factory=deque)
    kappa_ma: float = 1.0
    step: int = 0
    lr_S: float = 0.0
    lr_T: float = 0.0
    cd_phase: str = "S"
    cd_quiet: int = 0
    cd_phase_steps: int = 0
    cd_swapped: bool = False
    events: list = field(default_factory=list)


def update_kappa_ma(state: SchedulerState, kappa: float) -> float:
    """Push one coefficient and return the mean of the window (shorter during warm-up)."""
    if not kappa > 0:
        raise ValueError(f"kappa must be positive and finite, got {kappa}")
    state.buffer.append(float(kappa))
    while len(state.buffer) > state.config.n_kappa:
        state.buffer.popleft()
    state.kappa_ma = sum(state.buffer) / len(state.buffer)
    return state.kappa_ma


class Scheduler:
    def __init__(self, config: SchedulerConfig):
        config.validate()
        self.config = config
        self.state = SchedulerState(config=config)
        self.state.cd_phase = "T" if config.strategy == "language-cd" else "S"
        self.state.lr_S, self.state.lr_T = self._rates_at(0)

    @property
    def rates(self) -> tuple[float, float]:
        """(lr_S, lr_T) for the current step."""
        return self.state.lr_S, self.state.lr_T

    @property
    def events(self) -> list[dict]:
        return self.state.events

    def _rates_at(self, t: int) -> tuple[float, float]:
        c, st = self.config, self.state
        if c.strategy == "constant":
            return c.base_lr_S, c.base_lr_T
        if c.strategy == "language-up":
            return c.base_lr_S, c.up_lr
        if c.strategy == "vision-up":
            return c.up_lr, c.base_lr_T
        if c.strategy in ("feature-cd", "language-cd"):
            return (c.base_lr_S, 0.0) if st.cd_phase == "S" else (0.0, c.base_lr_T)
        # coordinated
        if t % c.period != 0:
            return st.lr_S, st.lr_T
        if len(st.buffer) >= c.n_kappa and t >= c.period:
            beta_T, beta_S = coordinated_rates(st.kappa_ma, c.alpha, c.gamma, c.kappa_min, c.kappa_max)
            kind = "coordinated"
        else:
            beta_S, beta_T = c.base_lr_S, c.base_lr_T
            kind = "warmup"
        st.events.append({"event": "refresh", "step": t, "kind": kind, "kappa_ma": st.kappa_ma,
                          "lr_S": beta_S, "lr_T": beta_T})
        return beta_S, beta_T

    def step_rates(self, record: BalanceRecord) -> tuple[float, float]:
        """Consume the record of the current step; return the rates of the next one.

        Fills ``record.kappa_ma`` with the moving average after this step.
        """
        c, st = self.config, self.state
        t = st.step
        if c.kappa_feed == "every-step" or (t + 1) % c.period == 0:
            update_kappa_ma(st, record.kappa)
        record.kappa_ma = st.kappa_ma
        if c.strategy in ("feature-cd", "language-cd"):
            self._track_cd(record, t)
        st.step = t + 1
        st.lr_S, st.lr_T = self._rates_at(st.step)
        return st.lr_S, st.lr_T

    def _track_cd(self, record: BalanceRecord, t: int) -> None:
        c, st = self.config, self.state
        if st.cd_swapped:
            return
        active = record.upd_S if st.cd_phase == "S" else record.upd_T
        st.cd_quiet = st.cd_quiet + 1 if active < c.cd_threshold else 0
        st.cd_phase_steps += 1
        stable = st.cd_quiet >= c.cd_patience
        timed_out = c.cd_max_phase > 0 and st.cd_phase_steps >= c.cd_max_phase
        if stable or timed_out:
            new = "T" if st.cd_phase == "S" else "S"
            st.events.append({"event": "cd-switch", "step": t + 1, "from": st.cd_phase, "to": new,
                              "reason": "stabilized" if stable else "max-phase"})
            # the second component then trains until the end of the run
            st.cd_phase = new
            st.cd_swapped = True
