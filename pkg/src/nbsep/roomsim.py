"""Shoebox image-method room simulation and randomized scene sampling.

Scenes follow the data-generation recipe used throughout this toolkit:
rooms with length/width in [3, 8] m and height in [3, 4] m, RT60 in
[0.1, 1.0] s, a horizontal circular microphone array (radius 5 cm) near the
room center at 1.5 m height, and speakers at 1.5 m height at least 0.5 m
from every wall, with the angular separation of the two speakers (seen from
the array center) drawn uniformly from [0, 180] degrees.

The simulator converts RT60 to one uniform wall reflection coefficient via
Sabine's formula and sums image sources with amplitude ``1 / (4 pi d)`` at
fractional delay ``d / c``, realized with an 81-tap Hann-windowed sinc.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .audio import WaveBuffer

SPEED_OF_SOUND = 343.0
SINC_HALF_WIDTH = 40  # 81-tap interpolation kernel

ROOM_LW_RANGE = (3.0, 8.0)
ROOM_H_RANGE = (3.0, 4.0)
RT60_RANGE = (0.1, 1.0)
ARRAY_RADIUS = 0.05
ARRAY_HEIGHT = 1.5
ARRAY_CENTER_JITTER = 0.5  # array center falls in a 1 m square at room center
SPEAKER_WALL_MARGIN = 0.5
MAX_REJECTIONS = 10_000


class SceneSamplingError(RuntimeError):
    """Rejection sampling could not satisfy the geometric constraints."""


@dataclass
class SceneConfig:
    """Sampled room geometry: dimensions, reverberation, mic/speaker layout."""

    room_dims: np.ndarray  # (3,) length, width, height in meters
    rt60: float
    mic_positions: np.ndarray  # (M, 3)
    speaker_positions: np.ndarray  # (N, 3)
    sound_speed: float = SPEED_OF_SOUND

    def __post_init__(self):
        self.room_dims = np.asarray(self.room_dims, dtype=np.float64)
        self.mic_positions = np.atleast_2d(np.asarray(self.mic_positions, dtype=np.float64))
        self.speaker_positions = np.atleast_2d(np.asarray(self.speaker_positions, dtype=np.float64))

    @property
    def n_mics(self) -> int:
        return self.mic_positions.shape[0]

    @property
    def n_speakers(self) -> int:
        return self.speaker_positions.shape[0]

    def validate(self) -> None:
        for name, pts in (("mic", self.mic_positions), ("speaker", self.speaker_positions)):
            if np.any(pts <= 0.0) or np.any(pts >= self.room_dims):
                raise ValueError(f"{name} position outside the room")

    def to_json(self) -> str:
        payload = {
            "room_dims": self.room_dims.tolist(),
            "rt60": self.rt60,
            "mic_positions": self.mic_positions.tolist(),
            "speaker_positions": self.speaker_positions.tolist(),
            "sound_speed": self.sound_speed,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "SceneConfig":
        d = json.loads(text)
        return SceneConfig(
            room_dims=np.array(d["room_dims"]),
            rt60=float(d["rt60"]),
            mic_positions=np.array(d["mic_positions"]),
            speaker_positions=np.array(d["speaker_positions"]),
            sound_speed=float(d.get("sound_speed", SPEED_OF_SOUND)),
        )

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json() + "\n")

    @staticmethod
    def load(path) -> "SceneConfig":
        return SceneConfig.from_json(Path(path).read_text())


@dataclass
class Rir:
    """Multichannel impulse responses, taps indexed (mic, speaker, tap)."""

    taps: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        if self.taps.ndim != 3:
            raise ValueError(f"Rir taps must be (M, N, K), got {self.taps.shape}")

    @property
    def n_mics(self) -> int:
        return self.taps.shape[0]

    @property
    def n_speakers(self) -> int:
        return self.taps.shape[1]

    @property
    def n_taps(self) -> int:
        return self.taps.shape[2]


def sample_scene(
    seed,
    n_speakers: int = 2,
    n_mics: int = 8,
    rt60_range: tuple[float, float] = RT60_RANGE,
) -> SceneConfig:
    """Draw a random scene; a fixed seed reproduces the scene bit-exactly.

    Sampling order (all from one `default_rng(seed)` stream): room length,
    width, height, RT60, array-center x/y jitter, then per attempt the
    speaker angular difference, first-speaker azimuth and the two radii.
    """
    rng = np.random.default_rng(seed)
    dims = np.array(
        [
            rng.uniform(*ROOM_LW_RANGE),
            rng.uniform(*ROOM_LW_RANGE),
            rng.uniform(*ROOM_H_RANGE),
        ]
    )
    rt60 = rng.uniform(*rt60_range)

    center = np.array(
        [
            dims[0] / 2 + rng.uniform(-ARRAY_CENTER_JITTER, ARRAY_CENTER_JITTER),
            dims[1] / 2 + rng.uniform(-ARRAY_CENTER_JITTER, ARRAY_CENTER_JITTER),
            ARRAY_HEIGHT,
        ]
    )
    angles = 2.0 * np.pi * np.arange(n_mics) / n_mics
    mics = np.stack(
        [
            center[0] + ARRAY_RADIUS * np.cos(angles),
            center[1] + ARRAY_RADIUS * np.sin(angles),
            np.full(n_mics, ARRAY_HEIGHT),
        ],
        axis=1,
    )

    lo = SPEAKER_WALL_MARGIN
    r_max = 0.5 * float(np.hypot(dims[0], dims[1]))
    for _ in range(MAX_REJECTIONS):
        delta = rng.uniform(0.0, np.pi)
        theta0 = rng.uniform(0.0, 2.0 * np.pi)
        thetas = theta0 + delta * np.arange(n_speakers)
        radii = rng.uniform(0.3, r_max, size=n_speakers)
        spk = np.stack(
            [
                center[0] + radii * np.cos(thetas),
                center[1] + radii * np.sin(thetas),
                np.full(n_speakers, ARRAY_HEIGHT),
            ],
            axis=1,
        )
        in_x = np.all((spk[:, 0] >= lo) & (spk[:, 0] <= dims[0] - lo))
        in_y = np.all((spk[:, 1] >= lo) & (spk[:, 1] <= dims[1] - lo))
        if in_x and in_y:
            return SceneConfig(dims, float(rt60), mics, spk)
    raise SceneSamplingError(
        f"no admissible speaker layout after {MAX_REJECTIONS} rejections"
    )


def sabine_reflection(room_dims, rt60: float) -> float:
    """Uniform wall reflection coefficient from Sabine's formula.

    ``alpha = 0.161 V / (S T60)`` and ``beta = sqrt(1 - alpha)``.  alpha is
    clamped just below 1 when the requested RT60 is shorter than the room
    can support; rt60 == 0 means fully absorbing walls.
    """
    if rt60 <= 0.0:
        return 0.0
    length, width, height = np.asarray(room_dims, dtype=np.float64)
    volume = length * width * height
    surface = 2.0 * (length * width + length * height + width * height)
    alpha = 0.161 * volume / (surface * rt60)
    alpha = min(alpha, 1.0 - 1e-3)
    return float(np.sqrt(1.0 - alpha))


def _axis_image_coords(pos: float, length: float, order: int):
    """Mirror-cell image coordinates and wall-hit counts along one axis.

    Cell i holds the image at ``i * length + (pos if i is even else
    length - pos)``; the walk from cell 0 to cell i crosses |i| walls.
    """
    cells = np.arange(-order, order + 1)
    coords = cells * length + np.where(cells % 2 == 0, pos, length - pos)
    return coords, np.abs(cells)


def default_image_order(scene: SceneConfig) -> tuple[int, int, int]:
    """Per-axis image counts that cover the RT60 decay path length."""
    path = scene.sound_speed * max(scene.rt60, 1e-3)
    return tuple(int(np.ceil(path / (2.0 * d))) + 1 for d in scene.room_dims)


def default_rir_length(scene: SceneConfig, sample_rate: int) -> int:
    """Tap count covering the decay plus the longest direct path and kernel."""
    dists = np.linalg.norm(
        scene.mic_positions[:, None, :] - scene.speaker_positions[None, :, :], axis=-1
    )
    margin = float(dists.max()) / scene.sound_speed
    return int(np.ceil((scene.rt60 + margin) * sample_rate)) + 2 * SINC_HALF_WIDTH + 2


def simulate_rir(
    scene: SceneConfig,
    max_order: int | tuple[int, int, int] | None = None,
    n_taps: int | None = None,
    sample_rate: int = 16000,
) -> Rir:
    """Image-method impulse responses for every mic-speaker pair.

    Each image source of distance d contributes ``beta**hits / (4 pi d)``
    through an 81-tap Hann-windowed sinc centered on the fractional delay
    ``d / c * sample_rate``.  `max_order` bounds the per-axis image index;
    None derives it from the RT60 decay path.
    """
    scene.validate()
    if max_order is None:
        orders = default_image_order(scene)
    elif np.isscalar(max_order):
        if max_order < 0:
            raise ValueError("max_order must be >= 0")
        orders = (int(max_order),) * 3
    else:
        orders = tuple(int(o) for o in max_order)
    if n_taps is None:
        n_taps = default_rir_length(scene, sample_rate)

    beta = sabine_reflection(scene.room_dims, scene.rt60)
    taps = np.zeros((scene.n_mics, scene.n_speakers, n_taps))
    for n in range(scene.n_speakers):
        src = scene.speaker_positions[n]
        cx, hx = _axis_image_coords(src[0], scene.room_dims[0], orders[0])
        cy, hy = _axis_image_coords(src[1], scene.room_dims[1], orders[1])
        cz, hz = _axis_image_coords(src[2], scene.room_dims[2], orders[2])
        # weight of an image factorizes over axes for a uniform beta
        wx, wy, wz = beta**hx, beta**hy, beta**hz
        for m in range(scene.n_mics):
            mic = scene.mic_positions[m]
            d = float(np.linalg.norm(src - mic))
            if d < 1e-3:
                raise ValueError("degenerate geometry: speaker coincides with a microphone")
            dx2 = (cx - mic[0]) ** 2
            dy2 = (cy - mic[1]) ** 2
            dz2 = (cz - mic[2]) ** 2
            dist = np.sqrt(dx2[:, None, None] + dy2[None, :, None] + dz2[None, None, :])
            amp = (wx[:, None, None] * wy[None, :, None] * wz[None, None, :]) / (
                4.0 * np.pi * dist
            )
            _scatter_sinc(
                taps[m, n],
                dist.ravel() * (sample_rate / scene.sound_speed),
                amp.ravel(),
            )
    return Rir(taps, sample_rate)


def _scatter_sinc(out: np.ndarray, centers: np.ndarray, amps: np.ndarray) -> None:
    """Accumulate Hann-windowed sincs at fractional sample positions."""
    n_taps = out.shape[0]
    base = np.floor(centers).astype(np.int64)
    for r in range(-SINC_HALF_WIDTH, SINC_HALF_WIDTH + 2):
        k = base + r
        u = k - centers
        valid = (np.abs(u) <= SINC_HALF_WIDTH) & (k >= 0) & (k < n_taps)
        if not np.any(valid):
            continue
        uu = u[valid]
        vals = amps[valid] * np.sinc(uu) * (0.5 * (1.0 + np.cos(np.pi * uu / SINC_HALF_WIDTH)))
        out += np.bincount(k[valid], weights=vals, minlength=n_taps)


def spatialize(dry: WaveBuffer, rir: Rir, speaker: int) -> WaveBuffer:
    """Convolve a mono dry signal with one speaker's RIRs, one output per mic.

    The full linear convolution is truncated to the dry signal's length.
    """
    if dry.n_channels != 1:
        raise ValueError("dry signal must be mono")
    if dry.sample_rate != rir.sample_rate:
        raise ValueError(
            f"sample-rate mismatch: dry {dry.sample_rate} Hz vs RIR {rir.sample_rate} Hz"
        )
    if not 0 <= speaker < rir.n_speakers:
        raise ValueError(f"speaker index {speaker} out of range [0, {rir.n_speakers})")
    x = dry.data[0]
    out = np.empty((rir.n_mics, dry.n_samples))
    for m in range(rir.n_mics):
        out[m] = fftconvolve(x, rir.taps[m, speaker])[: dry.n_samples]
    return WaveBuffer(out, dry.sample_rate)


def rir_to_wave(rir: Rir, speaker: int) -> WaveBuffer:
    """Expose one speaker's RIRs as a multichannel buffer (for WAV export)."""
    return WaveBuffer(rir.taps[:, speaker, :].copy(), rir.sample_rate)
