"""Two-stage alternating training loop.

Stage 1 trains each encoder on its own stream's augmented pairs with
the two-view swapped-prediction objective.  Stage 2 runs alternating
cycles: one stream's encoder and bank are optimized with the four-view
objective while the other encoder is frozen, then the roles swap, each
phase starting from the newest models.  Every phase is an independent
optimization: SGD-with-momentum velocity is reset and the per-step
cosine learning-rate schedule restarts (base lr at step 0, base *
final_lr_fraction at the last step).

Each stream keeps a FIFO feature queue.  Queues are cleared at phase
start and filled with the 2B feature columns produced each step; from
the phase's introduction epoch onward, queue columns pad the similarity
matrix handed to the assignment solver (only the batch columns of the
plan are kept for the loss).  Assignment targets come from the
equipartition solver by default; the ``softmax`` target mode replaces
them with plain softmax columns, which removes the equipartition
constraint and is the collapse ablation.

Training is single-threaded and bit-deterministic for a fixed config
and seed: every phase derives its own RNG stream from (seed, phase
index), so resuming stage 2 from a stage-1 checkpoint replays exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import evaluation
from .data import AugmentationSpec, TwoStreamDataset, iterate_batches
from .losses import LossConfig, cross_stream_loss, infonce, single_stream_loss
from .model import (EncoderParams, PrototypeBank, backward, embed, forward,
                    init_encoder, init_prototypes, load_tensors,
                    prototype_scores, renormalize, save_tensors)
from .numerics import Matrix, derive_rng, softmax_cols
from .sinkhorn import SinkhornConfig, assign

STAGE1_LOSSES = ("prototype", "infonce")
TARGET_MODES = ("sinkhorn", "softmax")


@dataclass(frozen=True)
class ModelConfig:
    hidden_dims: tuple = (64, 64)
    embedding_dim: int = 128
    num_prototypes: int = 300

    def __post_init__(self):
        if self.embedding_dim < 1 or self.num_prototypes < 2:
            raise ValueError("embedding_dim >= 1 and num_prototypes >= 2 required")


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 60
    cycle_epochs: int = 20
    cycles: int = 2
    batch_size: int = 128
    lr: float = 0.3
    final_lr_fraction: float = 1e-3
    weight_decay: float = 1e-6
    momentum: float = 0.9
    proto_freeze_epochs: int = 10
    queue_len: int = 512
    queue_start_epoch_stage1: int = 30
    queue_start_epoch_stage2: int = 5
    seed: int = 7
    stage1_loss: str = "prototype"
    target_mode: str = "sinkhorn"
    fresh_prototypes: bool = False

    def __post_init__(self):
        if min(self.stage1_epochs, self.cycle_epochs, self.cycles,
               self.proto_freeze_epochs, self.queue_len,
               self.queue_start_epoch_stage1, self.queue_start_epoch_stage2) < 0:
            raise ValueError("counts must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.final_lr_fraction <= 1.0:
            raise ValueError("final_lr_fraction must be in (0, 1]")
        if self.stage1_loss not in STAGE1_LOSSES:
            raise ValueError(f"stage1_loss must be one of {STAGE1_LOSSES}")
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"target_mode must be one of {TARGET_MODES}")


class FeatureQueue:
    """FIFO buffer of feature columns with fixed capacity."""

    def __init__(self, dim: int, capacity: int):
        self.capacity = int(capacity)
        self._buf = np.zeros((dim, max(self.capacity, 1)))
        self._start = 0
        self.fill = 0

    def push(self, cols: Matrix) -> None:
        if self.capacity == 0:
            return
        n = cols.shape[1]
        if n >= self.capacity:
            self._buf[:] = cols[:, n - self.capacity:]
            self._start, self.fill = 0, self.capacity
            return
        end = (self._start + self.fill) % self.capacity
        first = min(n, self.capacity - end)
        self._buf[:, end:end + first] = cols[:, :first]
        if n > first:
            self._buf[:, : n - first] = cols[:, first:]
        overflow = self.fill + n - self.capacity
        if overflow > 0:
            self._start = (self._start + overflow) % self.capacity
            self.fill = self.capacity
        else:
            self.fill += n

    def features(self) -> Matrix:
        """Stored columns, oldest first."""
        idx = (self._start + np.arange(self.fill)) % self.capacity
        return self._buf[:, idx]

    def clear(self) -> None:
        self._start = 0
        self.fill = 0


def phase_name(kind: str, cycle: int, stream: int) -> str:
    return f"stage1_s{stream}" if kind == "stage1" else f"cycle{cycle}_s{stream}"


def _hist_entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


@dataclass
class TrainState:
    enc1: EncoderParams
    enc2: EncoderParams
    bank1: PrototypeBank
    bank2: PrototypeBank
    queue1: FeatureQueue
    queue2: FeatureQueue
    velocity: dict = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    phase: str = ""

    def encoder(self, stream: int) -> EncoderParams:
        return self.enc1 if stream == 1 else self.enc2

    def bank(self, stream: int) -> PrototypeBank:
        return self.bank1 if stream == 1 else self.bank2

    def queue(self, stream: int) -> FeatureQueue:
        return self.queue1 if stream == 1 else self.queue2


def init_state(input_dims: tuple, mcfg: ModelConfig, cfg: TrainConfig) -> TrainState:
    """Fresh state with independent seed-derived initializations per stream."""
    dims1 = [input_dims[0], *mcfg.hidden_dims, mcfg.embedding_dim]
    dims2 = [input_dims[1], *mcfg.hidden_dims, mcfg.embedding_dim]
    state = TrainState(
        enc1=init_encoder(dims1, derive_rng(cfg.seed, 1001)),
        enc2=init_encoder(dims2, derive_rng(cfg.seed, 1002)),
        bank1=init_prototypes(mcfg.embedding_dim, mcfg.num_prototypes,
                              derive_rng(cfg.seed, 1003)),
        bank2=init_prototypes(mcfg.embedding_dim, mcfg.num_prototypes,
                              derive_rng(cfg.seed, 1004)),
        queue1=FeatureQueue(mcfg.embedding_dim, cfg.queue_len),
        queue2=FeatureQueue(mcfg.embedding_dim, cfg.queue_len),
    )
    _reset_velocity(state)
    return state


def _zero_like_params(enc: EncoderParams):
    return [(np.zeros_like(w), np.zeros_like(b))
            for w, b in zip(enc.weights, enc.biases)]


def _reset_velocity(state: TrainState) -> None:
    state.velocity = {
        "enc1": _zero_like_params(state.enc1),
        "enc2": _zero_like_params(state.enc2),
        "bank1": np.zeros_like(state.bank1.c),
        "bank2": np.zeros_like(state.bank2.c),
    }


def cosine_lr(base: float, final_fraction: float, step: int, total_steps: int) -> float:
    """Per-step cosine decay from base (step 0) to base*final_fraction (last step)."""
    if total_steps <= 1:
        return base
    t = step / (total_steps - 1)
    return base * (final_fraction + (1.0 - final_fraction)
                   * 0.5 * (1.0 + np.cos(np.pi * t)))


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float, weight_decay: float) -> None:
    """In-place momentum SGD: v <- m*v + g + wd*p; p <- p - lr*v."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ValueError(
            f"shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"velocity {velocity.shape}"
        )
    velocity *= momentum
    velocity += grad
    if weight_decay:
        velocity += weight_decay * param
    param -= lr * velocity


def _apply_encoder_grads(enc, grads, vel, lr, cfg: TrainConfig) -> None:
    for (w, b), (dw, db), (vw, vb) in zip(
            zip(enc.weights, enc.biases), grads, vel):
        sgd_step(w, dw, vw, lr, cfg.momentum, cfg.weight_decay)
        sgd_step(b, db, vb, lr, cfg.momentum, 0.0)


def _targets(z: Matrix, bank: PrototypeBank, queue: FeatureQueue,
             queue_active: bool, cfg: TrainConfig, sink_cfg: SinkhornConfig):
    """Constant target distributions for one view (columns sum to 1)."""
    b = z.shape[1]
    if queue_active and sink_cfg.include_queue and queue.fill:
        scores = prototype_scores(np.hstack([z, queue.features()]), bank)
    else:
        scores = prototype_scores(z, bank)
    if cfg.target_mode == "softmax":
        return softmax_cols(scores, sink_cfg.epsilon)[:, :b], scores[:, :b]
    a = assign(scores, sink_cfg, batch_cols=b)
    return a.distributions(), scores[:, :b]


def _usage_counts(scores: Matrix, counts: np.ndarray) -> None:
    ids, freq = np.unique(scores.argmax(axis=0), return_counts=True)
    counts[ids] += freq


def train_single_stream(state: TrainState, stream: int, ds: TwoStreamDataset,
                        cfg: TrainConfig, loss_cfg: LossConfig,
                        sink_cfg: SinkhornConfig, aug: AugmentationSpec,
                        phase_index: int = 0, log: list | None = None) -> TrainState:
    """Stage-1 optimization of one stream's encoder and bank."""
    if ds.num_samples == 0:
        raise ValueError("dataset is empty")
    enc, bank, queue = state.encoder(stream), state.bank(stream), state.queue(stream)
    rng = derive_rng(cfg.seed, 100 + phase_index)
    queue.clear()
    _reset_velocity(state)
    vel_enc = state.velocity[f"enc{stream}"]
    vel_bank = state.velocity[f"bank{stream}"]
    state.phase = phase_name("stage1", 0, stream)

    steps_per_epoch = ds.num_samples // cfg.batch_size
    total_steps = max(cfg.stage1_epochs * steps_per_epoch, 1)
    step = 0
    for epoch in range(cfg.stage1_epochs):
        bank.frozen = epoch < cfg.proto_freeze_epochs
        queue_active = epoch >= cfg.queue_start_epoch_stage1
        epoch_loss = 0.0
        counts = np.zeros(bank.num_prototypes, dtype=np.int64)
        lr = cfg.lr
        for batch in iterate_batches(ds, cfg.batch_size, aug, rng):
            x_i = batch.x1_i if stream == 1 else batch.x2_i
            x_j = batch.x1_j if stream == 1 else batch.x2_j
            z_i, tape_i = forward(enc, x_i)
            z_j, tape_j = forward(enc, x_j)
            lr = cosine_lr(cfg.lr, cfg.final_lr_fraction, step, total_steps)

            if cfg.stage1_loss == "infonce":
                out = infonce(z_i, z_j, loss_cfg.temperature)
            else:
                q_i, scores_i = _targets(z_i, bank, queue, queue_active, cfg, sink_cfg)
                q_j, _ = _targets(z_j, bank, queue, queue_active, cfg, sink_cfg)
                _usage_counts(scores_i, counts)
                out = single_stream_loss(z_i, z_j, bank, q_i, q_j, loss_cfg)

            grads_i, _ = backward(enc, tape_i, out.grad_z["i"])
            grads_j, _ = backward(enc, tape_j, out.grad_z["j"])
            grads = [(gi[0] + gj[0], gi[1] + gj[1])
                     for gi, gj in zip(grads_i, grads_j)]
            _apply_encoder_grads(enc, grads, vel_enc, lr, cfg)
            if out.grad_c is not None and not bank.frozen:
                sgd_step(bank.c, out.grad_c, vel_bank, lr, cfg.momentum, 0.0)
            renormalize(bank)
            queue.push(z_i)
            queue.push(z_j)
            epoch_loss += out.value
            step += 1
        if log is not None:
            log.append({
                "kind": "epoch", "phase": state.phase, "epoch": epoch,
                "loss": epoch_loss / max(steps_per_epoch, 1), "lr": lr,
                "queue_fill": queue.fill,
                "proto_entropy": _hist_entropy(counts) if counts.sum() else 0.0,
            })
        state.epoch += 1
    bank.frozen = False
    state.step += step
    return state


def train_cross_stream_phase(state: TrainState, stream: int, ds: TwoStreamDataset,
                             cfg: TrainConfig, loss_cfg: LossConfig,
                             sink_cfg: SinkhornConfig, aug: AugmentationSpec,
                             cycle: int = 1, phase_index: int = 2,
                             log: list | None = None) -> TrainState:
    """One stage-2 alternation: optimize `stream`, hold the other fixed."""
    if ds.num_samples == 0:
        raise ValueError("dataset is empty")
    other = 2 if stream == 1 else 1
    enc_s, enc_t = state.encoder(stream), state.encoder(other)
    if enc_s.num_layers == 0 or enc_t.num_layers == 0:
        raise ValueError("both encoders must be initialized before stage 2")
    bank_s = state.bank(stream)
    queue_s, queue_t = state.queue(stream), state.queue(other)
    rng = derive_rng(cfg.seed, 100 + phase_index)
    queue_s.clear()
    queue_t.clear()
    _reset_velocity(state)
    vel_enc = state.velocity[f"enc{stream}"]
    vel_bank = state.velocity[f"bank{stream}"]
    state.phase = phase_name("cycle", cycle, stream)
    cross_cfg = replace(loss_cfg, mode="cross_stream")

    steps_per_epoch = ds.num_samples // cfg.batch_size
    total_steps = max(cfg.cycle_epochs * steps_per_epoch, 1)
    step = 0
    for epoch in range(cfg.cycle_epochs):
        queue_active = epoch >= cfg.queue_start_epoch_stage2
        epoch_loss = 0.0
        counts = np.zeros(bank_s.num_prototypes, dtype=np.int64)
        lr = cfg.lr
        for batch in iterate_batches(ds, cfg.batch_size, aug, rng):
            if stream == 1:
                xs_i, xs_j, xt_i, xt_j = batch.x1_i, batch.x1_j, batch.x2_i, batch.x2_j
            else:
                xs_i, xs_j, xt_i, xt_j = batch.x2_i, batch.x2_j, batch.x1_i, batch.x1_j
            z_s_i, tape_i = forward(enc_s, xs_i)
            z_s_j, tape_j = forward(enc_s, xs_j)
            z_t_i, _ = forward(enc_t, xt_i)
            z_t_j, _ = forward(enc_t, xt_j)
            lr = cosine_lr(cfg.lr, cfg.final_lr_fraction, step, total_steps)

            q_s_i, scores_i = _targets(z_s_i, bank_s, queue_s, queue_active, cfg, sink_cfg)
            q_s_j, _ = _targets(z_s_j, bank_s, queue_s, queue_active, cfg, sink_cfg)
            q_t_i, _ = _targets(z_t_i, bank_s, queue_t, queue_active, cfg, sink_cfg)
            q_t_j, _ = _targets(z_t_j, bank_s, queue_t, queue_active, cfg, sink_cfg)
            _usage_counts(scores_i, counts)

            out = cross_stream_loss(z_s_i, z_s_j, z_t_i, z_t_j, bank_s,
                                    q_s_i, q_s_j, q_t_i, q_t_j, cross_cfg)
            grads_i, _ = backward(enc_s, tape_i, out.grad_z["s_i"])
            grads_j, _ = backward(enc_s, tape_j, out.grad_z["s_j"])
            grads = [(gi[0] + gj[0], gi[1] + gj[1])
                     for gi, gj in zip(grads_i, grads_j)]
            _apply_encoder_grads(enc_s, grads, vel_enc, lr, cfg)
            sgd_step(bank_s.c, out.grad_c, vel_bank, lr, cfg.momentum, 0.0)
            renormalize(bank_s)
            queue_s.push(z_s_i)
            queue_s.push(z_s_j)
            queue_t.push(z_t_i)
            queue_t.push(z_t_j)
            epoch_loss += out.value
            step += 1
        if log is not None:
            log.append({
                "kind": "epoch", "phase": state.phase, "epoch": epoch,
                "loss": epoch_loss / max(steps_per_epoch, 1), "lr": lr,
                "queue_fill": queue_s.fill,
                "proto_entropy": _hist_entropy(counts) if counts.sum() else 0.0,
            })
        state.epoch += 1
    state.step += step
    return state


def phase_retrieval(state: TrainState, train_ds: TwoStreamDataset,
                    test_ds: TwoStreamDataset, use_head: bool = False) -> dict:
    """R@1 for each stream and their average similarity."""
    f1_tr = embed(state.enc1, train_ds.x1, use_head=use_head)
    f1_te = embed(state.enc1, test_ds.x1, use_head=use_head)
    f2_tr = embed(state.enc2, train_ds.x2, use_head=use_head)
    f2_te = embed(state.enc2, test_ds.x2, use_head=use_head)
    s1 = evaluation.similarity_matrix(f1_tr, f1_te)
    s2 = evaluation.similarity_matrix(f2_tr, f2_te)
    r1 = evaluation.retrieval_from_similarities(s1, train_ds.labels, test_ds.labels, ks=(1,))
    r2 = evaluation.retrieval_from_similarities(s2, train_ds.labels, test_ds.labels, ks=(1,))
    rc = evaluation.retrieval_from_similarities(
        evaluation.combine_streams(s1, s2), train_ds.labels, test_ds.labels, ks=(1,))
    return {"r1_stream1": r1[1], "r1_stream2": r2[1], "r1_combined": rc[1]}


def run_full_pipeline(train_ds: TwoStreamDataset, test_ds: TwoStreamDataset,
                      mcfg: ModelConfig, cfg: TrainConfig, loss_cfg: LossConfig,
                      sink_cfg: SinkhornConfig, aug: AugmentationSpec,
                      state: TrainState | None = None,
                      skip_stage1: bool = False):
    """Run stage 1 on both streams, then the alternating cycles.

    Returns (state, log); the log is a list of JSON-serializable records,
    one per epoch plus one per phase with retrieval numbers, ending with
    a "combine" record mirroring the phase-progress readout.
    """
    log: list = []
    if state is None:
        state = init_state((train_ds.x1.shape[0], train_ds.x2.shape[0]), mcfg, cfg)

    def record_phase(name):
        rec = {"kind": "phase", "phase": name}
        rec.update(phase_retrieval(state, train_ds, test_ds))
        log.append(rec)

    if not skip_stage1:
        train_single_stream(state, 1, train_ds, cfg, loss_cfg, sink_cfg, aug,
                            phase_index=0, log=log)
        record_phase("stage1_s1")
        train_single_stream(state, 2, train_ds, cfg, loss_cfg, sink_cfg, aug,
                            phase_index=1, log=log)
        record_phase("stage1_s2")

    if cfg.fresh_prototypes:
        state.bank1 = init_prototypes(state.bank1.dim, state.bank1.num_prototypes,
                                      derive_rng(cfg.seed, 1005))
        state.bank2 = init_prototypes(state.bank2.dim, state.bank2.num_prototypes,
                                      derive_rng(cfg.seed, 1006))

    for cycle in range(1, cfg.cycles + 1):
        for stream in (1, 2):
            phase_index = 2 + (cycle - 1) * 2 + (stream - 1)
            train_cross_stream_phase(state, stream, train_ds, cfg, loss_cfg,
                                     sink_cfg, aug, cycle=cycle,
                                     phase_index=phase_index, log=log)
            record_phase(phase_name("cycle", cycle, stream))

    final = {"kind": "phase", "phase": "combine"}
    final.update(phase_retrieval(state, train_ds, test_ds))
    log.append(final)
    return state, log


def dataset_usage_entropy(state: TrainState, stream: int, ds: TwoStreamDataset,
                          batch_size: int = 512) -> float:
    """Entropy of nearest-prototype usage over a full evaluation pass."""
    enc, bank = state.encoder(stream), state.bank(stream)
    x = ds.x1 if stream == 1 else ds.x2
    ids = []
    for start in range(0, ds.num_samples, batch_size):
        z = embed(enc, x[:, start:start + batch_size], use_head=True)
        ids.append(prototype_scores(z, bank).argmax(axis=0))
    return evaluation.usage_entropy(np.concatenate(ids), bank.num_prototypes)


# ---------------------------------------------------------------------------
# Checkpointing


def state_to_tensors(state: TrainState) -> dict:
    tensors = {}
    for name, enc in (("enc1", state.enc1), ("enc2", state.enc2)):
        for l, (w, b) in enumerate(zip(enc.weights, enc.biases)):
            tensors[f"{name}/{l}/W"] = w
            tensors[f"{name}/{l}/b"] = b
    tensors["bank1/c"] = state.bank1.c
    tensors["bank2/c"] = state.bank2.c
    for name in ("enc1", "enc2"):
        for l, (vw, vb) in enumerate(state.velocity[name]):
            tensors[f"vel/{name}/{l}/W"] = vw
            tensors[f"vel/{name}/{l}/b"] = vb
    tensors["vel/bank1/c"] = state.velocity["bank1"]
    tensors["vel/bank2/c"] = state.velocity["bank2"]
    tensors["meta/epoch"] = np.float64(state.epoch)
    tensors["meta/step"] = np.float64(state.step)
    return tensors


def state_from_tensors(tensors: dict, queue_len: int = 0) -> TrainState:
    def read_encoder(name):
        weights, biases = [], []
        l = 0
        while f"{name}/{l}/W" in tensors:
            weights.append(tensors[f"{name}/{l}/W"])
            biases.append(tensors[f"{name}/{l}/b"])
            l += 1
        return EncoderParams(weights=weights, biases=biases)

    enc1, enc2 = read_encoder("enc1"), read_encoder("enc2")
    bank1 = PrototypeBank(c=tensors["bank1/c"])
    bank2 = PrototypeBank(c=tensors["bank2/c"])
    state = TrainState(
        enc1=enc1, enc2=enc2, bank1=bank1, bank2=bank2,
        queue1=FeatureQueue(bank1.dim, queue_len),
        queue2=FeatureQueue(bank2.dim, queue_len),
        epoch=int(tensors["meta/epoch"]),
        step=int(tensors["meta/step"]),
    )
    _reset_velocity(state)
    for name in ("enc1", "enc2"):
        for l, (vw, vb) in enumerate(state.velocity[name]):
            vw[:] = tensors[f"vel/{name}/{l}/W"]
            vb[:] = tensors[f"vel/{name}/{l}/b"]
    state.velocity["bank1"][:] = tensors["vel/bank1/c"]
    state.velocity["bank2"][:] = tensors["vel/bank2/c"]
    return state


def save_checkpoint(state: TrainState, path) -> None:
    save_tensors(path, state_to_tensors(state))


def load_checkpoint(path, queue_len: int = 0) -> TrainState:
    return state_from_tensors(load_tensors(path), queue_len=queue_len)


def write_metric_log(log: list, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in log:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
