"""Finite-difference verification of every analytic gradient.

Each check builds a random encoder (depths 0 to 3), random inputs, and
frozen assignment targets, then compares the analytic gradient of the
requested objective with central differences (default h = 1e-5) for
every encoder weight, bias, and prototype entry.  Targets are held
constant while perturbing, matching the stop-gradient contract.

Relative error uses max(|analytic|, |numeric|, floor) in the
denominator so near-zero entries do not inflate the ratio.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import LossConfig, cross_stream_loss, infonce, single_stream_loss
from .model import backward, forward, init_encoder, init_prototypes
from .numerics import derive_rng, l2_normalize_cols
from .sinkhorn import SinkhornConfig, assign

MODES = ("infonce", "single_stream", "cross_stream")


@dataclass
class CheckResult:
    mode: str
    seed: int
    depth: int
    parameter: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def _rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def _fd_grad(fn, arr: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros_like(arr)
    flat = arr.ravel()
    g = out.ravel()
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        up = fn()
        flat[idx] = orig - h
        down = fn()
        flat[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return out


def _random_setup(seed: int, depth: int, input_dim=6, hidden=7, out_dim=5,
                  num_protos=6, batch=5):
    rng = derive_rng(seed, 7000, depth)
    dims = [input_dim] + [hidden] * max(depth - 1, 0) + [out_dim]
    if depth == 0:
        dims = []
        out_dim = input_dim
    enc = init_encoder(dims, rng) if dims else init_encoder([], rng)
    bank = init_prototypes(out_dim, num_protos, rng)
    x_i = rng.normal(size=(input_dim, batch))
    x_j = rng.normal(size=(input_dim, batch))
    return rng, enc, bank, x_i, x_j


def _targets_for(z, bank, sink_cfg):
    return assign(bank.c.T @ z, sink_cfg).distributions()


def check_one(mode: str, seed: int, depth: int, tol: float = 1e-4,
              h: float = 1e-5, sign_flip: bool = False) -> list:
    """Run one configuration; returns a list of CheckResult."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    rng, enc, bank, x_i, x_j = _random_setup(seed, depth)
    sink_cfg = SinkhornConfig(epsilon=0.05, iterations=3)
    loss_cfg = LossConfig(temperature=0.1)

    z_i, tape_i = forward(enc, x_i)
    z_j, tape_j = forward(enc, x_j)

    if mode == "infonce":
        def value():
            zi, _ = forward(enc, x_i)
            zj, _ = forward(enc, x_j)
            return infonce(zi, zj, loss_cfg.temperature).value

        out = infonce(z_i, z_j, loss_cfg.temperature)
        grad_c = None
    elif mode == "single_stream":
        q_i = _targets_for(z_i, bank, sink_cfg)
        q_j = _targets_for(z_j, bank, sink_cfg)

        def value():
            zi, _ = forward(enc, x_i)
            zj, _ = forward(enc, x_j)
            return single_stream_loss(zi, zj, bank, q_i, q_j, loss_cfg).value

        out = single_stream_loss(z_i, z_j, bank, q_i, q_j, loss_cfg)
        grad_c = out.grad_c
    else:
        # frozen-stream features: unit-norm constants, no encoder behind them
        z_t_i = l2_normalize_cols(rng.normal(size=z_i.shape))
        z_t_j = l2_normalize_cols(rng.normal(size=z_i.shape))
        q_s_i = _targets_for(z_i, bank, sink_cfg)
        q_s_j = _targets_for(z_j, bank, sink_cfg)
        q_t_i = _targets_for(z_t_i, bank, sink_cfg)
        q_t_j = _targets_for(z_t_j, bank, sink_cfg)

        def value():
            zi, _ = forward(enc, x_i)
            zj, _ = forward(enc, x_j)
            return cross_stream_loss(zi, zj, z_t_i, z_t_j, bank,
                                     q_s_i, q_s_j, q_t_i, q_t_j,
                                     LossConfig(temperature=0.1, mode="cross_stream")).value

        out = cross_stream_loss(z_i, z_j, z_t_i, z_t_j, bank,
                                q_s_i, q_s_j, q_t_i, q_t_j,
                                LossConfig(temperature=0.1, mode="cross_stream"))
        grad_c = out.grad_c

    key_i = "i" if mode != "cross_stream" else "s_i"
    key_j = "j" if mode != "cross_stream" else "s_j"
    grads_i, _ = backward(enc, tape_i, out.grad_z[key_i])
    grads_j, _ = backward(enc, tape_j, out.grad_z[key_j])

    results = []

    def add(name, analytic, target_array):
        numeric = _fd_grad(value, target_array, h)
        if sign_flip:
            analytic = analytic.copy()
            analytic.ravel()[0] = -analytic.ravel()[0] - 1.0
        results.append(CheckResult(mode=mode, seed=seed, depth=depth,
                                   parameter=name,
                                   max_rel_err=_rel_err(analytic, numeric),
                                   tolerance=tol))

    for l in range(enc.num_layers):
        add(f"layer{l}/W", grads_i[l][0] + grads_j[l][0], enc.weights[l])
        add(f"layer{l}/b", grads_i[l][1] + grads_j[l][1], enc.biases[l])
    if grad_c is not None:
        add("prototypes", grad_c, bank.c)
    return results


def run_checks(modes=MODES, seeds=range(10), depths=(0, 2, 3), tol: float = 1e-4,
               h: float = 1e-5, sign_flip: bool = False) -> list:
    """Full sweep; cross-stream needs an encoder, so depth 0 is skipped there."""
    results = []
    for mode in modes:
        for seed in seeds:
            for depth in depths:
                if depth == 0 and mode != "single_stream":
                    continue
                results.extend(check_one(mode, seed, depth, tol=tol, h=h,
                                         sign_flip=sign_flip))
    return results
