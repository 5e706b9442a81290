"""Optimization loop: frequency batching, Adam, plateau LR halving, clipping.

A mini-batch is a set of utterances; every utterance contributes all F of
its normalized narrow-band sequences.  The per-utterance loss couples the
frequencies (binding + inverse STFT + permutation-invariant SI-SDR), so all
frequencies of one utterance live in one graph; utterances are stacked into
shared graphs in fixed-size chunks and their losses averaged, which keeps
runs bit-reproducible for a given seed in single-threaded mode.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dataset, model as model_mod, objective, roomsim, stft
from .audio import WaveBuffer
from .autodiff import NumericError, Tensor


@dataclass
class TrainConfig:
    utterances_per_batch: int = 16
    lr_init: float = 1e-3
    lr_min: float = 1e-4
    plateau_epochs: int = 3
    clip_norm: float = 5.0
    max_epochs: int = 10
    seed: int = 0
    precision: str = "float32"  # float32 for speed, float64 for verification
    graph_chunk: int = 4  # utterances stacked into one graph

    def __post_init__(self):
        if self.lr_min > self.lr_init:
            raise ValueError("lr_min must not exceed lr_init")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def init(params: dict) -> "AdamState":
        return AdamState(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
        )

    def serialize(self, out_dir) -> dict:
        out_dir = Path(out_dir)
        for name, arr in self.m.items():
            (out_dir / f"{name}.m.bin").write_bytes(
                np.ascontiguousarray(arr, dtype="<f4").tobytes()
            )
            (out_dir / f"{name}.v.bin").write_bytes(
                np.ascontiguousarray(self.v[name], dtype="<f4").tobytes()
            )
        return {
            "step": self.step, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "tensors": sorted(self.m.keys()),
        }

    @staticmethod
    def deserialize(manifest: dict, opt_dir, params: dict, dtype) -> "AdamState":
        opt_dir = Path(opt_dir)
        m, v = {}, {}
        for name in manifest["tensors"]:
            shape = params[name].shape
            m[name] = np.frombuffer((opt_dir / f"{name}.m.bin").read_bytes(),
                                    dtype="<f4").reshape(shape).astype(dtype)
            v[name] = np.frombuffer((opt_dir / f"{name}.v.bin").read_bytes(),
                                    dtype="<f4").reshape(shape).astype(dtype)
        return AdamState(m=m, v=v, step=int(manifest["step"]),
                         beta1=manifest["beta1"], beta2=manifest["beta2"],
                         eps=manifest["eps"])


def global_grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def clip_gradients(grads: dict, clip_norm: float) -> tuple[dict, float]:
    """Scale all gradients by clip_norm/norm when the global norm exceeds it."""
    norm = global_grad_norm(grads)
    if norm > clip_norm:
        factor = clip_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              clip_norm: float | None = None) -> float:
    """One clipped Adam update in place; returns the pre-clip gradient norm.

    Rejects the step (raises NumericError) on any non-finite gradient.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step rejected")
    if clip_norm is not None:
        grads, norm = clip_gradients(grads, clip_norm)
    else:
        norm = global_grad_norm(grads)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return norm


def schedule_lr(history, current_lr: float, lr_init: float = 1e-3,
                patience: int = 3, factor: float = 0.5, lr_min: float = 1e-4) -> float:
    """Halve the LR when the best validation loss stalls for `patience` epochs.

    Pure function of the full loss history: the wait counter resets on every
    improvement and on every halving, and the LR never drops below `lr_min`.
    """
    if not len(history):
        raise ValueError("history must contain at least one epoch")
    lr = lr_init
    best = np.inf
    wait = 0
    for loss in history:
        if loss < best:
            best = loss
            wait = 0
            continue
        wait += 1
        if wait >= patience:
            lr = max(lr * factor, lr_min)
            wait = 0
    del current_lr  # derivable from the history; kept for call-site symmetry
    return lr


# -- batches ----------------------------------------------------------------------


@dataclass
class Utterance:
    """One example prepared for the network: normalized sequences + targets."""

    sequences: np.ndarray  # (F, 2M, T) normalized
    norm: dataset.NormState
    target_spectra: np.ndarray  # complex (N, F, T)
    out_len: int
    example_id: str = ""

    @property
    def n_frequencies(self) -> int:
        return self.sequences.shape[0]


@dataclass
class Batch:
    utterances: list

    @property
    def n_sequences(self) -> int:
        return sum(u.n_frequencies for u in self.utterances)


def prepare_utterance(example: dataset.MixtureExample) -> Utterance:
    seqs, norm = dataset.normalize_spectrogram(example.mixture)
    targets = np.stack([t.data[:, :, 0] for t in example.targets])
    return Utterance(
        sequences=seqs,
        norm=norm,
        target_spectra=targets,
        out_len=example.mixture_wave.n_samples,
        example_id=example.example_id,
    )


def assemble_batch(examples) -> Batch:
    """Expand utterances into their narrow-band sequences, grouped by utterance."""
    utterances = [prepare_utterance(ex) for ex in examples]
    frames = {u.sequences.shape[-1] for u in utterances}
    if len(frames) > 1:
        raise ValueError(f"inconsistent frame counts in batch: {sorted(frames)}")
    return Batch(utterances)


def _chunk_loss(model, utterances, cfg_stft, train, rng):
    """Mean fPIT loss of several utterances stacked into one graph."""
    dtype = model.dtype
    stacked = np.concatenate([u.sequences for u in utterances]).astype(dtype)
    out = model.forward(Tensor(stacked), train=train, rng=rng)
    total = None
    assignments = []
    offset = 0
    for u in utterances:
        pred = ad.narrow(out, 0, offset, u.n_frequencies)
        offset += u.n_frequencies
        scales = u.norm.scale.astype(dtype)
        pred = ad.mul(pred, Tensor(scales[:, None, None]))
        loss, assignment = objective.fpit(pred, u.target_spectra, cfg_stft, u.out_len)
        assignments.append(assignment)
        total = loss if total is None else ad.add(total, loss)
    return ad.scale(total, 1.0 / len(utterances)), assignments


def batch_loss(model, batch: Batch, cfg_stft, train=False, rng=None,
               graph_chunk: int = 4, accumulate_grads: bool = False):
    """Mean loss over a batch; optionally backprops and returns summed grads.

    Utterances are processed in fixed-order chunks of `graph_chunk`; with
    `accumulate_grads` the (batch-mean) gradients are gathered into a dict.
    """
    utts = batch.utterances
    n = len(utts)
    grads: dict = {}
    total = 0.0
    assignments = []
    for start in range(0, n, graph_chunk):
        chunk = utts[start : start + graph_chunk]
        loss, assign = _chunk_loss(model, chunk, cfg_stft, train, rng)
        assignments.extend(assign)
        total += loss.item() * len(chunk)
        if accumulate_grads:
            ad.zero_grad(model.params)
            ad.backward(loss)
            w = len(chunk) / n
            for name, t in model.params.items():
                if t.grad is None:
                    continue
                if name in grads:
                    grads[name] += w * t.grad
                else:
                    grads[name] = w * t.grad
    mean = total / n
    if accumulate_grads:
        ad.zero_grad(model.params)
        return mean, grads, assignments
    return mean, assignments


# -- training loop ------------------------------------------------------------------


@dataclass
class TrainResult:
    epochs: int
    steps: int
    best_val: float
    log_path: Path


def train(model, train_examples, val_examples, cfg: TrainConfig,
          stft_cfg: stft.StftConfig, out_dir, log_every: int = 1) -> TrainResult:
    """Full optimization run over in-memory examples; writes logs and checkpoints."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.astype(cfg.dtype)
    state = AdamState.init(model.params)
    rng = np.random.default_rng(cfg.seed)
    order_rng = np.random.default_rng(cfg.seed + 1)

    train_batchable = [prepare_utterance(ex) for ex in train_examples]
    val_batch = assemble_batch(val_examples) if val_examples else None

    lr = cfg.lr_init
    history: list[float] = []
    best_val = np.inf
    step = 0
    log_path = out_dir / "train_log.csv"
    with log_path.open("w", newline="") as fh:
        log = csv.writer(fh)
        log.writerow(["step", "epoch", "train_loss", "val_loss", "lr", "grad_norm"])
        for epoch in range(1, cfg.max_epochs + 1):
            order = order_rng.permutation(len(train_batchable))
            for b0 in range(0, len(order), cfg.utterances_per_batch):
                idx = order[b0 : b0 + cfg.utterances_per_batch]
                batch = Batch([train_batchable[i] for i in idx])
                loss, grads, _ = batch_loss(
                    model, batch, stft_cfg, train=True, rng=rng,
                    graph_chunk=cfg.graph_chunk, accumulate_grads=True,
                )
                norm = adam_step(model.params, grads, state, lr, cfg.clip_norm)
                step += 1
                if step % log_every == 0:
                    log.writerow([step, epoch, f"{loss:.6f}", "", f"{lr:.6g}", f"{norm:.6f}"])

            val_loss = np.nan
            if val_batch is not None:
                val_loss, _ = batch_loss(model, val_batch, stft_cfg, train=False,
                                         graph_chunk=cfg.graph_chunk)
                history.append(val_loss)
                lr = schedule_lr(history, lr, lr_init=cfg.lr_init,
                                 patience=cfg.plateau_epochs, lr_min=cfg.lr_min)
            log.writerow([step, epoch, "", f"{val_loss:.6f}", f"{lr:.6g}", ""])
            fh.flush()

            model_mod.save_checkpoint(out_dir / "checkpoint_last", model, state, step)
            if val_batch is not None and val_loss < best_val:
                best_val = val_loss
                model_mod.save_checkpoint(out_dir / "checkpoint_best", model, state, step)
    return TrainResult(epochs=cfg.max_epochs, steps=step,
                       best_val=float(best_val), log_path=log_path)


# -- overfit probe ------------------------------------------------------------------


def synthetic_dry_source(rng, n_samples: int, sample_rate: int) -> WaveBuffer:
    """Speech-like dry signal: amplitude-modulated noise with a random tilt."""
    noise = rng.standard_normal(n_samples)
    t = np.arange(n_samples) / sample_rate
    env = 0.2 + np.abs(np.sin(2.0 * np.pi * rng.uniform(1.0, 4.0) * t + rng.uniform(0, 2 * np.pi)))
    smooth = np.convolve(noise, np.ones(8) / 8.0, mode="same")
    mix = rng.uniform(0.2, 0.8)
    sig = env * (mix * noise + (1.0 - mix) * smooth)
    return WaveBuffer(sig / np.max(np.abs(sig)), sample_rate)


def build_probe_examples(n_examples: int, stft_cfg: stft.StftConfig, seed: int,
                         n_mics: int = 2, duration_samples: int | None = None,
                         rt60: float = 0.2):
    """Small simulated two-speaker mixtures for learning-loop verification.

    The segment length is snapped to the frame grid so the inverse STFT in
    the loss covers every sample.
    """
    if duration_samples is None:
        duration_samples = stft_cfg.sample_rate
    t_frames = stft_cfg.n_frames(duration_samples)
    out_len = stft_cfg.covered_len(t_frames)
    examples = []
    for i in range(n_examples):
        rng = np.random.default_rng([seed, i])
        scene = roomsim.sample_scene(rng, n_mics=n_mics)
        scene.rt60 = float(rt60)  # keep the probe's image count small
        s1 = synthetic_dry_source(rng, out_len, stft_cfg.sample_rate)
        s2 = synthetic_dry_source(rng, out_len, stft_cfg.sample_rate)
        overlap = rng.uniform(0.5, 1.0)
        examples.append(
            dataset.mix_pair(s1, s2, overlap, scene, out_len=out_len,
                             stft_cfg=stft_cfg, example_id=f"probe{i}")
        )
    return examples


def overfit_probe(model_cfg: model_mod.ModelConfig, examples, steps: int,
                  stft_cfg: stft.StftConfig, lr: float = 1e-3, seed: int = 0,
                  eval_every: int = 200, precision: str = "float32",
                  clip_norm: float = 5.0, examples_per_step: int = 1):
    """Train on a fixed set of mixtures and track SI-SDR improvement on them.

    Each Adam step consumes `examples_per_step` mixtures in a fixed
    round-robin order (one by default, so a step stays cheap).  Returns
    (model, curve) where curve lists (step, mean improvement in dB) pairs
    including step 0.  Raises NumericError if the loss diverges.
    """
    dtype = np.float32 if precision == "float32" else np.float64
    model = model_mod.NarrowBandModel(model_cfg, seed=seed, dtype=dtype)
    state = AdamState.init(model.params)
    utterances = [prepare_utterance(ex) for ex in examples]

    def improvement() -> float:
        vals = []
        for ex in examples:
            est, _, _ = model.separate(ex.mixture_wave, stft_cfg)
            vals.append(objective.evaluate(ex, est).improvement)
        return float(np.mean(vals))

    curve = [(0, improvement())]
    cursor = 0
    for step in range(1, steps + 1):
        chunk = [utterances[(cursor + i) % len(utterances)]
                 for i in range(examples_per_step)]
        cursor = (cursor + examples_per_step) % len(utterances)
        batch = Batch(chunk)
        loss, grads, _ = batch_loss(model, batch, stft_cfg, train=False,
                                    graph_chunk=len(chunk), accumulate_grads=True)
        if not np.isfinite(loss):
            raise NumericError(f"training diverged at step {step}")
        adam_step(model.params, grads, state, lr, clip_norm)
        if step % eval_every == 0 or step == steps:
            curve.append((step, improvement()))
    return model, curve
