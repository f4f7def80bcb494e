"""Observation construction, action mapping, and the actor/critic bundle.

The default image code is a 16-dimensional deterministic texture statistic;
a small learned conv encoder (pretrained by the bandit task) is an optional
mode.  The critic additionally receives a Fourier encoding of the frame
index, which is training-only privileged information.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionMismatch
from .frontend import FrontendParams, MAX_FEATURES
from .imagery import GrayImage, area_downsample
from .nn import ConvEncoder, MlpNet

NUM_FOURIER_BANDS = 17
LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0
TEXTURE_STATS_DIM = 16
GRAD_FRACTION_LEVELS = (0.02, 0.05, 0.1)
CHECKPOINT_VERSION = 1


def texture_stats(image: GrayImage) -> np.ndarray:
    """16 deterministic statistics summarizing texture, contrast, and noise.

    Layout: [mean, std, grad mean, grad p25/p50/p75/p90, laplacian variance,
    frac grad > 0.02/0.05/0.1, 4-bin intensity histogram, 8x8 thumbnail std].
    Gradients are central differences over interior pixels; the Laplacian is
    the 4-neighbor stencil.
    """
    a = image.data
    interior = a[1:-1, 1:-1]
    gx = 0.5 * (a[1:-1, 2:] - a[1:-1, :-2])
    gy = 0.5 * (a[2:, 1:-1] - a[:-2, 1:-1])
    gmag = np.sqrt(gx * gx + gy * gy)
    lap = a[:-2, 1:-1] + a[2:, 1:-1] + a[1:-1, :-2] + a[1:-1, 2:] - 4.0 * interior

    # bincount formulation of a 4-bin histogram over [0, 1], last bin closed
    idx = np.minimum((a * 4.0).astype(np.int64), 3)
    hist = np.bincount(idx.ravel(), minlength=4) / a.size

    thumb = area_downsample(a, 8, 8)
    stats = np.empty(TEXTURE_STATS_DIM)
    stats[0] = a.mean()
    stats[1] = a.std()
    stats[2] = gmag.mean()
    stats[3:7] = np.percentile(gmag, [25.0, 50.0, 75.0, 90.0])
    stats[7] = lap.var()
    for i, level in enumerate(GRAD_FRACTION_LEVELS):
        stats[8 + i] = float((gmag > level).mean())
    stats[11:15] = hist
    stats[15] = thumb.std()
    return stats


def fourier_features(frame_index: int, num_bands: int = NUM_FOURIER_BANDS,
                     horizon: int = 128) -> np.ndarray:
    """Sinusoidal encoding of the normalized frame index: 2*num_bands values
    ordered as all sines then all cosines, frequencies 2^k * pi."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    t = frame_index / horizon
    ks = np.arange(num_bands)
    angles = (2.0 ** ks) * math.pi * t
    return np.concatenate([np.sin(angles), np.cos(angles)])


def _quantize_fast(value: float) -> int:
    # round-half-down, clamped to the discrete threshold range
    return int(np.clip(math.ceil(value - 0.5), 0, 209))


def _quantize_patch(value: float) -> int:
    # nearest odd integer, ties toward the smaller odd value
    m = math.ceil((value - 2.0) / 2.0)
    return int(np.clip(2 * m + 1, 3, 41))


def quantize_params(fast: float, patch: float, ransac: float) -> FrontendParams:
    """Snap continuous parameter-space values onto the valid grid."""
    return FrontendParams(
        fast_threshold=_quantize_fast(fast),
        klt_patch_size=_quantize_patch(patch),
        ransac_threshold=float(np.clip(ransac, 0.0, 3.0)),
    )


def map_action(raw: np.ndarray) -> FrontendParams:
    """Map a raw action in [-1, 1]^3 onto the parameter ranges.

    Components are clamped first; centers/half-ranges are (104.5, 104.5) for
    the FAST threshold, (22, 19) for the patch size, (1.5, 1.5) for the
    RANSAC threshold.
    """
    r = np.clip(np.asarray(raw, dtype=np.float64).reshape(3), -1.0, 1.0)
    return quantize_params(104.5 + 104.5 * r[0], 22.0 + 19.0 * r[1], 1.5 + 1.5 * r[2])


def raw_from_params(params: FrontendParams) -> np.ndarray:
    """Inverse of map_action up to quantization (exact on the grid)."""
    return np.array(
        [
            (params.fast_threshold - 104.5) / 104.5,
            (params.klt_patch_size - 22.0) / 19.0,
            (params.ransac_threshold - 1.5) / 1.5,
        ]
    )


@dataclass
class Observation:
    image_code: np.ndarray
    count_cur: float  # feature counts normalized by max_features
    count_prev: float
    last_action: np.ndarray  # previous raw action, 3-vector

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.image_code, [self.count_cur, self.count_prev], self.last_action]
        )


@dataclass
class PrivilegedCriticInput:
    observation: Observation
    frame_index: int
    horizon: int
    num_bands: int = NUM_FOURIER_BANDS

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.observation.to_vector(),
                fourier_features(self.frame_index, self.num_bands, self.horizon),
            ]
        )


class GaussianPolicyHead:
    """State-independent learned log-std, clamped to [-5, 1]."""

    def __init__(self, dim: int = 3, init_log_std: float = -0.5):
        self.log_std = np.full(dim, float(init_log_std))

    @property
    def std(self) -> np.ndarray:
        return np.exp(np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX))


def policy_forward(obs_vec: np.ndarray, net: MlpNet, head: GaussianPolicyHead):
    """Deterministic forward pass: tanh-squashed mean plus the head's std."""
    mean = np.tanh(net.forward(obs_vec))
    return mean, head.std


def value_forward(input_vec: np.ndarray, net: MlpNet) -> np.ndarray:
    """Critic forward pass; scalar value per input row, no squashing."""
    out = net.forward(input_vec)
    return out[..., 0] if out.ndim > 1 else out[0]


def gaussian_log_prob(mean: np.ndarray, std: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log density, summed over action dimensions."""
    z = (actions - mean) / std
    per_dim = -0.5 * z ** 2 - np.log(std) - 0.5 * math.log(2.0 * math.pi)
    return per_dim.sum(axis=-1)


def encode_image(image: GrayImage, encoder: ConvEncoder) -> np.ndarray:
    """Latent code of the zero-centered area-averaged thumbnail."""
    thumb = area_downsample(image.data, encoder.side, encoder.side) - 0.5
    return encoder.forward(thumb[None, None, :, :])[0]


class PolicyBundle:
    """Actor, privileged critic, and observation configuration in one unit."""

    def __init__(
        self,
        obs_mode: str = "texture",
        hidden=(256, 256),
        horizon: int = 128,
        max_features: int = MAX_FEATURES,
        num_bands: int = NUM_FOURIER_BANDS,
        encoder: Optional[ConvEncoder] = None,
        rng: Optional[np.random.Generator] = None,
        init_log_std: float = -0.5,
    ):
        if obs_mode not in ("texture", "encoder"):
            raise ValueError(f"unknown observation mode {obs_mode!r}")
        if obs_mode == "encoder" and encoder is None:
            encoder = ConvEncoder(rng=rng)
        if rng is None:
            rng = np.random.default_rng()
        self.obs_mode = obs_mode
        self.encoder = encoder if obs_mode == "encoder" else encoder
        self.horizon = horizon
        self.max_features = max_features
        self.num_bands = num_bands
        code_dim = TEXTURE_STATS_DIM if obs_mode == "texture" else encoder.latent_dim
        self.obs_dim = code_dim + 2 + 3
        self.critic_dim = self.obs_dim + 2 * num_bands
        self.policy_net = MlpNet([self.obs_dim, *hidden, 3], rng=rng, final_gain=0.01)
        self.critic_net = MlpNet([self.critic_dim, *hidden, 1], rng=rng, final_gain=1.0)
        self.head = GaussianPolicyHead(3, init_log_std)

    def image_code(self, image: GrayImage) -> np.ndarray:
        if self.obs_mode == "texture":
            return texture_stats(image)
        return encode_image(image, self.encoder)

    def observe(self, image: GrayImage, count_cur: int, count_prev: int,
                last_action: np.ndarray) -> Observation:
        return Observation(
            image_code=self.image_code(image),
            count_cur=count_cur / self.max_features,
            count_prev=count_prev / self.max_features,
            last_action=np.asarray(last_action, dtype=np.float64).reshape(3),
        )

    def act_mean(self, obs: Observation) -> np.ndarray:
        mean, _ = policy_forward(obs.to_vector(), self.policy_net, self.head)
        return mean

    def trainable_params(self):
        return self.policy_net.params + [self.head.log_std], self.critic_net.params


def save_checkpoint(path, bundle: PolicyBundle, update_index: int = 0,
                    total_updates: int = 0, extra: Optional[dict] = None) -> None:
    """Write a versioned npz checkpoint.

    Keys: `version`, `obs_mode`, `horizon`, `max_features`, `num_bands`,
    `update_index`, `total_updates`, `policy_sizes`/`critic_sizes`,
    `policy_N`/`critic_N` weight arrays in net.params order, `log_std`, and
    (encoder mode only) `encoder_side`, `encoder_channels`, `encoder_latent`,
    `encoder_N` arrays.
    """
    payload = {
        "version": np.array(CHECKPOINT_VERSION),
        "obs_mode": np.array(bundle.obs_mode),
        "horizon": np.array(bundle.horizon),
        "max_features": np.array(bundle.max_features),
        "num_bands": np.array(bundle.num_bands),
        "update_index": np.array(update_index),
        "total_updates": np.array(total_updates),
        "policy_sizes": np.array(bundle.policy_net.sizes),
        "critic_sizes": np.array(bundle.critic_net.sizes),
        "log_std": bundle.head.log_std,
    }
    for i, p in enumerate(bundle.policy_net.params):
        payload[f"policy_{i}"] = p
    for i, p in enumerate(bundle.critic_net.params):
        payload[f"critic_{i}"] = p
    if bundle.obs_mode == "encoder":
        payload["encoder_side"] = np.array(bundle.encoder.side)
        payload["encoder_channels"] = np.array(bundle.encoder.channels)
        payload["encoder_latent"] = np.array(bundle.encoder.latent_dim)
        for i, p in enumerate(bundle.encoder.params):
            payload[f"encoder_{i}"] = p
    if extra:
        for k, v in extra.items():
            payload[k] = np.asarray(v)
    np.savez(path, **payload)


def load_checkpoint(path):
    """Load a checkpoint; returns (bundle, metadata dict)."""
    with np.load(path, allow_pickle=False) as z:
        version = int(z["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        obs_mode = str(z["obs_mode"])
        policy_sizes = [int(s) for s in z["policy_sizes"]]
        hidden = tuple(policy_sizes[1:-1])
        encoder = None
        if obs_mode == "encoder":
            encoder = ConvEncoder(
                side=int(z["encoder_side"]),
                channels=tuple(int(c) for c in z["encoder_channels"]),
                latent_dim=int(z["encoder_latent"]),
            )
            encoder.set_params([z[f"encoder_{i}"] for i in range(len(encoder.params))])
        bundle = PolicyBundle(
            obs_mode=obs_mode,
            hidden=hidden,
            horizon=int(z["horizon"]),
            max_features=int(z["max_features"]),
            num_bands=int(z["num_bands"]),
            encoder=encoder,
        )
        bundle.policy_net.set_params([z[f"policy_{i}"] for i in range(2 * (len(policy_sizes) - 1))])
        critic_sizes = [int(s) for s in z["critic_sizes"]]
        bundle.critic_net.set_params([z[f"critic_{i}"] for i in range(2 * (len(critic_sizes) - 1))])
        bundle.head.log_std = np.array(z["log_std"])
        meta = {
            "update_index": int(z["update_index"]),
            "total_updates": int(z["total_updates"]),
        }
    if bundle.policy_net.sizes != policy_sizes or bundle.critic_net.sizes != critic_sizes:
        raise DimensionMismatch("checkpoint layer sizes disagree with rebuilt nets")
    return bundle, meta
