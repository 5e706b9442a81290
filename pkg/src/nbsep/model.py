"""Narrow-band separation network.

One shared network maps each frequency's (2M, T) real/imaginary sequence to
the (2N, T) sequences of the separated speakers: an input Conv1d lifts the
sequence to `width` channels, a stack of modified Conformer blocks mixes it,
and a transposed Conv1d projects back.  A block applies

    a   = x + dropout(RPSA(LayerNorm(x)))
    f   = SiLU(Linear(LayerNorm(a)))            -> inner_width channels
    f   = SiLU(GroupNorm(GroupConv(f)))          (conv_blocks times)
    out = dropout(Linear(dropout(f)))           -> width channels

with no residual around the feed-forward path by default (`ff_residual`
turns one on).  RPSA is multi-head self-attention with Transformer-XL
style relative positional encoding: learned content/position bias vectors
per head and a shared learned projection of sinusoidal relative-distance
encodings.

All sequences may carry a leading batch axis, so a whole utterance's
frequencies (or several utterances) run through one graph.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dataset, stft
from .audio import WaveBuffer
from .autodiff import Tensor


@dataclass
class ModelConfig:
    in_channels: int = 8  # microphones M
    speakers: int = 2
    width: int = 192  # hidden units inside a block
    inner_width: int = 384  # hidden units of the conv feed-forward path
    blocks: int = 4
    conv_blocks: int = 3  # group-conv sub-blocks per block (the ablation knob)
    heads: int = 8
    groups: int = 8  # group conv / group norm partitions
    io_kernel: int = 4  # first Conv1d and last Conv1dT kernel size
    conv_kernel: int = 3
    dropout: float = 0.1
    ff_residual: bool = False

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.inner_width % self.groups:
            raise ValueError(
                f"inner_width {self.inner_width} not divisible by groups {self.groups}"
            )
        if self.conv_blocks < 0:
            raise ValueError("conv_blocks must be >= 0")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd to preserve the frame count")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


@dataclass
class SeparatedSpectra:
    """Per-speaker full-band complex spectra, shape (N, F, T)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 3:
            raise ValueError(f"expected (N, F, T), got {self.data.shape}")

    @property
    def n_speakers(self) -> int:
        return self.data.shape[0]


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_parameters(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> dict[str, Tensor]:
    """Fan-in uniform weights, zero biases, unit/zero norm affines."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    h1, h2, dh = cfg.width, cfg.inner_width, cfg.head_dim

    p["in_conv.w"] = _uniform(rng, 2 * cfg.in_channels * cfg.io_kernel,
                              (h1, 2 * cfg.in_channels, cfg.io_kernel), dtype)
    p["in_conv.b"] = np.zeros(h1, dtype=dtype)
    for i in range(cfg.blocks):
        b = f"block{i}"
        p[f"{b}.attn_norm.gamma"] = np.ones(h1, dtype=dtype)
        p[f"{b}.attn_norm.beta"] = np.zeros(h1, dtype=dtype)
        for name in ("wq", "wk", "wv", "wr", "wo"):
            p[f"{b}.attn.{name}"] = _uniform(rng, h1, (h1, h1), dtype)
        p[f"{b}.attn.u"] = np.zeros((cfg.heads, dh), dtype=dtype)
        p[f"{b}.attn.v"] = np.zeros((cfg.heads, dh), dtype=dtype)
        p[f"{b}.ff_norm.gamma"] = np.ones(h1, dtype=dtype)
        p[f"{b}.ff_norm.beta"] = np.zeros(h1, dtype=dtype)
        p[f"{b}.ff_in.w"] = _uniform(rng, h1, (h2, h1), dtype)
        p[f"{b}.ff_in.b"] = np.zeros(h2, dtype=dtype)
        for j in range(cfg.conv_blocks):
            p[f"{b}.conv{j}.w"] = _uniform(
                rng, (h2 // cfg.groups) * cfg.conv_kernel,
                (h2, h2 // cfg.groups, cfg.conv_kernel), dtype,
            )
            p[f"{b}.conv{j}.b"] = np.zeros(h2, dtype=dtype)
            p[f"{b}.conv{j}.norm.gamma"] = np.ones(h2, dtype=dtype)
            p[f"{b}.conv{j}.norm.beta"] = np.zeros(h2, dtype=dtype)
        p[f"{b}.ff_out.w"] = _uniform(rng, h2, (h1, h2), dtype)
        p[f"{b}.ff_out.b"] = np.zeros(h1, dtype=dtype)
    p["out_conv.w"] = _uniform(rng, h1 * cfg.io_kernel,
                               (h1, 2 * cfg.speakers, cfg.io_kernel), dtype)
    p["out_conv.b"] = np.zeros(2 * cfg.speakers, dtype=dtype)
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def parameter_count(params: dict[str, Tensor]) -> int:
    return int(sum(t.size for t in params.values()))


def relative_encoding_table(T: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal encodings of relative offsets -(T-1)..(T-1), shape (2T-1, dim)."""
    offsets = np.arange(-(T - 1), T, dtype=np.float64)
    inv_freq = 1.0 / (10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim))
    angles = offsets[:, None] * inv_freq[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1).astype(dtype)


def relative_index_table(T: int) -> np.ndarray:
    """idx[q, k] maps pair (q, k) to the offset entry for k - q."""
    q = np.arange(T)
    return (q[None, :] - q[:, None]) + (T - 1)


class NarrowBandModel:
    """Configuration plus named parameter tensors, with forward/inference."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None,
                 seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        self.params = params if params is not None else init_parameters(cfg, seed, dtype)
        self.step = 0

    @property
    def dtype(self):
        return self.params["in_conv.w"].dtype

    def astype(self, dtype) -> "NarrowBandModel":
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        return self

    # -- forward ----------------------------------------------------------------

    def forward(self, x, train: bool = False, rng=None, collect_attention: bool = False,
                checked: bool = False):
        """Run the network on (2M, T) or batched (B, 2M, T) sequences.

        Returns the (.., 2N, T) output Tensor, or (output, attention) with
        `collect_attention`, where attention is a list per block of
        (..., heads, T, T) softmax matrices (ndarray, detached).
        """
        cfg = self.cfg
        p = self.params
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.shape[-2] != 2 * cfg.in_channels:
            raise ValueError(
                f"expected {2 * cfg.in_channels} input rows, got {x.shape[-2]}"
            )
        t_len = x.shape[-1]
        drop = cfg.dropout if train else 0.0
        attn_maps = []

        def check(name, t):
            if checked and not np.all(np.isfinite(t.data)):
                raise ad.NumericError(f"non-finite activation after {name}")
            return t

        h = check("in_conv", ad.conv1d(x, p["in_conv.w"], p["in_conv.b"],
                                       padding=(cfg.io_kernel - 1, 0)))
        rel_table = Tensor(relative_encoding_table(t_len, cfg.width, self.dtype))

        for i in range(cfg.blocks):
            b = f"block{i}"
            a = ad.layer_norm(h, p[f"{b}.attn_norm.gamma"], p[f"{b}.attn_norm.beta"])
            a = self._rpsa(a, i, rel_table,
                           attn_maps if collect_attention else None)
            a = ad.dropout(a, drop, rng, train)
            h = check(f"{b}.attn", ad.add(h, a))

            f = ad.layer_norm(h, p[f"{b}.ff_norm.gamma"], p[f"{b}.ff_norm.beta"])
            f = ad.silu(ad.add(ad.matmul(p[f"{b}.ff_in.w"], f),
                               ad.reshape(p[f"{b}.ff_in.b"], (-1, 1))))
            for j in range(cfg.conv_blocks):
                f = ad.conv1d(f, p[f"{b}.conv{j}.w"], p[f"{b}.conv{j}.b"],
                              padding=(cfg.conv_kernel // 2, cfg.conv_kernel // 2),
                              groups=cfg.groups)
                f = ad.group_norm(f, p[f"{b}.conv{j}.norm.gamma"],
                                  p[f"{b}.conv{j}.norm.beta"], cfg.groups)
                f = check(f"{b}.conv{j}", ad.silu(f))
            f = ad.dropout(f, drop, rng, train)
            f = ad.add(ad.matmul(p[f"{b}.ff_out.w"], f),
                       ad.reshape(p[f"{b}.ff_out.b"], (-1, 1)))
            f = ad.dropout(f, drop, rng, train)
            h = check(f"{b}.ff", ad.add(f, h) if cfg.ff_residual else f)

        out = ad.conv_transpose1d(h, p["out_conv.w"], p["out_conv.b"])
        out = ad.narrow(out, -1, 0, t_len)  # crop the trailing kernel tail
        out = check("out_conv", out)
        if collect_attention:
            return out, attn_maps
        return out

    def _rpsa(self, xn: Tensor, block: int, rel_table: Tensor,
              attn_sink: list | None) -> Tensor:
        cfg = self.cfg
        p = self.params
        b = f"block{block}"
        heads, dh, t_len = cfg.heads, cfg.head_dim, xn.shape[-1]
        batch = xn.shape[:-2]

        def heads_first(z):
            # (..., H1, T) -> (..., heads, T, dh)
            z = ad.reshape(z, batch + (heads, dh, t_len))
            perm = tuple(range(len(batch))) + (len(batch), len(batch) + 2, len(batch) + 1)
            return ad.transpose(z, perm)

        q = heads_first(ad.matmul(p[f"{b}.attn.wq"], xn))
        k = ad.reshape(ad.matmul(p[f"{b}.attn.wk"], xn), batch + (heads, dh, t_len))
        v = heads_first(ad.matmul(p[f"{b}.attn.wv"], xn))

        u = ad.reshape(p[f"{b}.attn.u"], (heads, 1, dh))
        vb = ad.reshape(p[f"{b}.attn.v"], (heads, 1, dh))
        content = ad.matmul(ad.add(q, u), k)  # (..., heads, T, T)

        rel = ad.matmul(p[f"{b}.attn.wr"], ad.transpose(rel_table, (1, 0)))
        rel = ad.reshape(rel, (heads, dh, 2 * t_len - 1))
        position = ad.relative_shift(ad.matmul(ad.add(q, vb), rel))

        logits = ad.scale(ad.add(content, position), 1.0 / np.sqrt(dh))
        probs = ad.softmax(logits)
        if attn_sink is not None:
            attn_sink.append(probs.numpy())

        o = ad.matmul(probs, v)  # (..., heads, T, dh)
        perm = tuple(range(len(batch))) + (len(batch), len(batch) + 2, len(batch) + 1)
        o = ad.reshape(ad.transpose(o, perm), batch + (cfg.width, t_len))
        return ad.matmul(p[f"{b}.attn.wo"], o)

    # -- full-band inference ------------------------------------------------------

    def bind(self, outputs: np.ndarray, norm: dataset.NormState) -> SeparatedSpectra:
        """Denormalize per-frequency outputs and stack them into full spectra.

        `outputs` is (F, 2N, T) (a list of per-frequency (2N, T) arrays is
        also accepted); rows 2n / 2n+1 become the real/imaginary parts of
        speaker n.
        """
        if not isinstance(outputs, np.ndarray):
            if any(o is None for o in outputs):
                raise ValueError("missing frequency output")
            outputs = np.stack(outputs)
        if outputs.shape[0] != norm.scale.shape[0]:
            raise ValueError(
                f"{outputs.shape[0]} frequency outputs but {norm.scale.shape[0]} scales"
            )
        denorm = outputs * norm.scale[:, None, None]
        spectra = denorm[:, 0::2, :] + 1j * denorm[:, 1::2, :]  # (F, N, T)
        return SeparatedSpectra(spectra.transpose(1, 0, 2))

    def separate(self, mixture: WaveBuffer, stft_cfg: stft.StftConfig):
        """Separate a mixture waveform; returns (estimates, spectra, seconds).

        Estimates are (N, L) at the mixture's length; `seconds` is the
        processing wall time used for real-time-factor reporting.
        """
        t0 = time.perf_counter()
        spec = stft.stft(mixture, stft_cfg)
        seqs, norm = dataset.normalize_spectrogram(spec)
        out = self.forward(Tensor(seqs.astype(self.dtype)))
        spectra = self.bind(out.numpy().astype(np.float64), norm)
        waves = np.stack(
            [
                stft.istft(
                    stft.ComplexSpectrogram(spectra.data[n]), stft_cfg, mixture.n_samples
                ).data[0]
                for n in range(spectra.n_speakers)
            ]
        )
        return waves, spectra, time.perf_counter() - t0

    def attention_maps(self, example: dataset.MixtureExample) -> np.ndarray:
        """Frequency-averaged attention, shape (blocks, heads, T, T)."""
        seqs, _ = dataset.normalize_spectrogram(example.mixture)
        _, maps = self.forward(Tensor(seqs.astype(self.dtype)), collect_attention=True)
        return np.stack([m.mean(axis=0) for m in maps])


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, model: NarrowBandModel, optimizer_state=None, step: int = 0) -> None:
    """Write a checkpoint directory: JSON manifest + one float32 .bin per tensor."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in model.params.items():
        (path / "params" / f"{name}.bin").write_bytes(
            np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        )
        entries.append({"name": name, "shape": list(t.shape), "dtype": "float32"})
    manifest = {
        "model_config": asdict(model.cfg),
        "training_step": int(step),
        "params": entries,
    }
    if optimizer_state is not None:
        (path / "opt").mkdir(exist_ok=True)
        manifest["optimizer"] = optimizer_state.serialize(path / "opt")
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path, dtype=np.float64):
    """Load (model, optimizer_manifest_or_None, step) from a checkpoint dir."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    cfg = ModelConfig(**manifest["model_config"])
    params = {}
    for entry in manifest["params"]:
        raw = (path / "params" / f"{entry['name']}.bin").read_bytes()
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).astype(dtype)
        params[entry["name"]] = Tensor(arr, requires_grad=True)
    model = NarrowBandModel(cfg, params)
    model.step = int(manifest.get("training_step", 0))
    return model, manifest.get("optimizer"), model.step
