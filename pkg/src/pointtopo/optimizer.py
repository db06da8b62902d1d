"""Outer optimization loop over topology parameters.

Adam is implemented here; L-BFGS-B delegates to scipy's implementation
(projected gradient with a Moré-Thuente strong-Wolfe line search) and adds
trace bookkeeping, evaluation budgets and a steepest-descent restart when the
line search stalls.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy import optimize as sopt

log = logging.getLogger(__name__)


@dataclass
class BetaSchedule:
    every: int = 50
    factor: float = 2.0
    beta_max: float = 1e3


@dataclass
class OptProblem:
    """Parameters, objective and budget of one optimization run.

    Either ``fun`` (x -> (loss, grad)) is given directly, or ``task`` and
    ``topology``: the task evaluates ``value_and_grad(topology)`` and the
    topology supplies ``with_params`` / ``with_beta``.
    """

    x0: np.ndarray
    fun: Callable | None = None
    task: Any = None
    topology: Any = None
    lower: np.ndarray | float | None = None
    upper: np.ndarray | float | None = None
    max_iters: int = 100
    max_evals: int = 1000
    beta_schedule: BetaSchedule | None = None
    method: str = "lbfgsb"
    options: dict = field(default_factory=dict)
    seed: int = 0
    loss_scale: float = 1.0    # the optimizer sees (and the trace records) loss_scale * loss

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).copy()
        n = len(self.x0)
        lo = -np.inf if self.lower is None else self.lower
        hi = np.inf if self.upper is None else self.upper
        self.lower = np.broadcast_to(np.asarray(lo, dtype=float), (n,)).copy()
        self.upper = np.broadcast_to(np.asarray(hi, dtype=float), (n,)).copy()
        if np.any(self.lower > self.upper):
            raise ValueError("parameter bounds: lower exceeds upper")
        if self.max_iters < 0 or self.max_evals < 0:
            raise ValueError("budget must be non-negative")
        if not self.loss_scale > 0:
            raise ValueError("loss_scale must be positive")
        if self.fun is None and (self.task is None or self.topology is None):
            raise ValueError("OptProblem needs either fun or task + topology")

    @property
    def beta0(self):
        return getattr(self.topology, "beta", None)

    def objective(self, beta=None):
        if self.fun is not None:
            base = self.fun
        else:
            topo = self.topology if beta is None else self.topology.with_beta(beta)

            def base(x):
                return self.task.value_and_grad(topo.with_params(x))
        if self.loss_scale == 1.0:
            return base
        k = self.loss_scale

        def scaled(x):
            v, g = base(x)
            return k * v, k * np.asarray(g)
        return scaled


@dataclass
class IterRecord:
    iteration: int
    loss: float
    grad_norm: float
    step_norm: float
    beta: float | None
    wall_time: float


@dataclass
class OptTrace:
    records: list = field(default_factory=list)
    best_params: np.ndarray | None = None
    best_loss: float = np.inf
    best_beta: float | None = None
    termination: str = ""
    evaluations: int = 0
    error: str | None = None

    def add(self, x, loss, grad, step_norm, beta, t0):
        rec = IterRecord(len(self.records), float(loss), float(np.linalg.norm(grad)),
                         float(step_norm), beta, time.perf_counter() - t0)
        self.records.append(rec)
        if loss < self.best_loss:
            self.best_loss = float(loss)
            self.best_params = np.array(x, dtype=float)
            self.best_beta = beta

    @property
    def losses(self):
        return np.array([r.loss for r in self.records])

    @property
    def best_so_far(self):
        return np.minimum.accumulate(self.losses) if self.records else np.array([])

    def extend(self, other: "OptTrace"):
        offset = len(self.records)
        for r in other.records:
            self.records.append(IterRecord(offset + r.iteration, r.loss, r.grad_norm,
                                           r.step_norm, r.beta, r.wall_time))
        if other.best_loss < self.best_loss:
            self.best_loss, self.best_params, self.best_beta = other.best_loss, other.best_params, other.best_beta
        self.evaluations += other.evaluations
        self.termination = other.termination
        self.error = other.error

    def to_csv(self, path):
        """Deterministic columns only; wall-clock times go to the event log."""
        with open(path, "w") as fh:
            fh.write("iteration,loss,grad_norm,step_norm,beta,best_loss\n")
            best = self.best_so_far
            for r, b in zip(self.records, best):
                beta = "" if r.beta is None else repr(float(r.beta))
                fh.write(f"{r.iteration},{float(r.loss)!r},{float(r.grad_norm)!r},{float(r.step_norm)!r},{beta},{float(b)!r}\n")

    def write_events(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps({"event": "iteration", **r.__dict__}) + "\n")
            fh.write(json.dumps({"event": "done", "termination": self.termination, "error": self.error,
                                 "best_loss": self.best_loss, "evaluations": self.evaluations}) + "\n")


class _Budget(Exception):
    pass


class _Counter:
    """Wraps the objective: counts evaluations and enforces the budget."""

    def __init__(self, fun, max_evals):
        self.fun, self.max_evals, self.count = fun, max_evals, 0
        self.cache = {}

    def __call__(self, x):
        key = x.tobytes()
        if key in self.cache:
            return self.cache[key]
        if self.count >= self.max_evals:
            raise _Budget
        self.count += 1
        f, g = self.fun(np.array(x, dtype=float))
        out = (float(f), np.asarray(g, dtype=float))
        if len(self.cache) >= 4:
            self.cache.pop(next(iter(self.cache)))
        self.cache[key] = out
        return out


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))

    def step(self, x, g, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.t += 1
        self.m = beta1 * self.m + (1 - beta1) * g
        self.v = beta2 * self.v + (1 - beta2) * g * g
        mhat = self.m / (1 - beta1 ** self.t)
        vhat = self.v / (1 - beta2 ** self.t)
        return x - lr * mhat / (np.sqrt(vhat) + eps)


def adam(problem: OptProblem, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8, iters=None,
         x0=None, beta=None, max_evals=None) -> OptTrace:
    """Adam with bias correction; iterates are clamped to the box after every step.

    A non-finite loss halves the learning rate and retries from the previous
    iterate, at most five times in a row.
    """
    iters = problem.max_iters if iters is None else iters
    fun = _Counter(problem.objective(beta), problem.max_evals if max_evals is None else max_evals)
    x = np.clip(np.array(problem.x0 if x0 is None else x0, dtype=float), problem.lower, problem.upper)
    state = AdamState.zeros(len(x))
    trace = OptTrace()
    t0 = time.perf_counter()
    prev_x, step_norm, retries = None, 0.0, 0
    it = 0
    try:
        while True:
            f, g = fun(x)
            if not (np.isfinite(f) and np.all(np.isfinite(g))):
                if prev_x is None or retries >= 5:
                    trace.termination = "non-finite loss"
                    break
                retries += 1
                lr *= 0.5
                x = np.clip(state.step(prev_x, prev_g, lr, beta1, beta2, eps), problem.lower, problem.upper)
                continue
            retries = 0
            trace.add(x, f, g, step_norm, beta, t0)
            if it >= iters:
                trace.termination = "budget"
                break
            prev_x, prev_g = x, g
            x = np.clip(state.step(x, g, lr, beta1, beta2, eps), problem.lower, problem.upper)
            step_norm = float(np.linalg.norm(x - prev_x))
            it += 1
    except _Budget:
        trace.termination = "budget"
    except Exception as exc:  # keep the partial trace; callers decide how to report
        trace.termination = "error"
        trace.error = f"{type(exc).__name__}: {exc}"
        log.error("objective failed: %s", trace.error)
    trace.evaluations = fun.count
    if trace.best_params is None:
        trace.best_params = x
    return trace


def _projected_grad_norm(x, g, lo, hi):
    pg = np.clip(x - g, lo, hi) - x
    return float(np.max(np.abs(pg))) if len(pg) else 0.0


def lbfgsb(problem: OptProblem, memory=10, iters=None, tolerance=1e-8, x0=None, beta=None,
           max_evals=None) -> OptTrace:
    """Box-constrained limited-memory BFGS.

    Terminates when the projected-gradient infinity norm drops to
    ``tolerance`` or the budget runs out. A line-search failure restarts
    from the best iterate with cleared curvature memory (a steepest-descent
    first step); a second failure ends the run with "line search stall".
    """
    iters = problem.max_iters if iters is None else iters
    fun = _Counter(problem.objective(beta), problem.max_evals if max_evals is None else max_evals)
    lo, hi = problem.lower, problem.upper
    x = np.clip(np.array(problem.x0 if x0 is None else x0, dtype=float), lo, hi)
    trace = OptTrace()
    t0 = time.perf_counter()
    bounds = list(zip(np.where(np.isfinite(lo), lo, None), np.where(np.isfinite(hi), hi, None)))
    last = [x]
    stalls = 0
    try:
        f, g = fun(x)
        trace.add(x, f, g, 0.0, beta, t0)
        if _projected_grad_norm(x, g, lo, hi) <= tolerance:
            trace.termination = "converged"
        elif iters == 0:
            trace.termination = "budget"
        while not trace.termination:
            remaining = iters - (len(trace.records) - 1)
            if remaining <= 0:
                trace.termination = "budget"
                break

            def callback(intermediate_result):
                xk = np.asarray(intermediate_result.x, dtype=float)
                fk, gk = fun(xk)
                trace.add(xk, fk, gk, float(np.linalg.norm(xk - last[0])), beta, t0)
                last[0] = xk

            best_before = trace.best_loss
            res = sopt.minimize(fun, trace.best_params, jac=True, method="L-BFGS-B", bounds=bounds,
                                callback=callback,
                                options={"maxcor": memory, "maxiter": remaining, "gtol": tolerance,
                                         "ftol": 1e-15, "maxfun": max(1, fun.max_evals - fun.count + 1),
                                         "maxls": 40})
            msg = str(res.message).upper()
            fb, gb = fun(trace.best_params)
            if _projected_grad_norm(trace.best_params, gb, lo, hi) <= tolerance:
                trace.termination = "converged"
            elif any(k in msg for k in ("ABNORMAL", "LINE SEARCH", "RELATIVE REDUCTION", "REL_REDUCTION")):
                # scipy also reports a collapsed line search as a relative-reduction stop;
                # restarts continue while they make progress, two idle failures in a row end the run
                stalls = 1 if trace.best_loss < best_before else stalls + 1
                if stalls >= 2:
                    trace.termination = "line search stall"
                log.info("L-BFGS-B line search failed; restarting with steepest descent")
            else:
                trace.termination = "budget"
    except _Budget:
        trace.termination = "budget"
    except Exception as exc:  # keep the partial trace; callers decide how to report
        trace.termination = "error"
        trace.error = f"{type(exc).__name__}: {exc}"
        log.error("objective failed: %s", trace.error)
    trace.evaluations = fun.count
    if trace.best_params is None:
        trace.best_params = x
    return trace


@dataclass
class RunResult:
    trace: OptTrace
    topology: Any
    params: np.ndarray


def run(problem: OptProblem) -> RunResult:
    """Run the configured optimizer, applying beta continuation between restarts."""
    method = {"adam": adam, "lbfgsb": lbfgsb}[problem.method]
    opts = dict(problem.options)
    sched = problem.beta_schedule
    beta = problem.beta0
    total = OptTrace()
    x = problem.x0.copy()
    iters_left, evals_left = problem.max_iters, problem.max_evals
    while True:
        n = iters_left if sched is None or beta is None else min(iters_left, sched.every)
        sub = method(problem, iters=n, x0=x, beta=beta, max_evals=evals_left, **opts)
        total.extend(sub)
        iters_left -= max(len(sub.records) - 1, 0)
        evals_left -= sub.evaluations
        if sub.best_params is not None:
            x = sub.best_params
        if sub.termination == "error":
            break
        if iters_left <= 0 or evals_left <= 0:
            total.termination = "budget" if sub.termination != "converged" or iters_left < 0 else sub.termination
            break
        if sched is None or beta is None or beta >= sched.beta_max:
            total.termination = sub.termination
            break
        if sub.termination in ("non-finite loss", "line search stall"):
            break
        beta = min(beta * sched.factor, sched.beta_max)
    if problem.max_iters == 0:
        total.termination = "budget"
    best = total.best_params if total.best_params is not None else problem.x0
    topo = None
    if problem.topology is not None:
        topo = problem.topology.with_params(best)
        if total.best_beta is not None:
            topo = topo.with_beta(total.best_beta)
    return RunResult(total, topo, best)
