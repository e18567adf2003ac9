"""Observation encoder and the query-denoising transformer decoder.

The decoder follows the usual DETR layout (self-attention, cross-attention,
feed-forward) but cross-attention is reduced to bilinear reads of the latent
grid at the query's current polyline points. Each layer emits a coordinate
refinement; the next layer reads the latent grid at the refined points.
"""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import NO_OBJECT, NoiseSchedule, QuerySet

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_queries: int = 20
    n_points: int = 10
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    d_latent: int = 32
    obs_channels: int = 4
    enc_hidden: int = 32
    enc_kernel: int = 3
    enc_dilations: tuple[int, int] = (1, 3)
    grid_h: int = 100
    grid_w: int = 50
    sigma_data: float = 0.5
    n_offsets: int = 0  # 0: read the latent only at the points themselves
    offset_radius: float = 2.0  # initial ring radius of learned offsets, in cells
    point_head: bool = True  # per-point coordinate head fed by the point's own latent read
    d_point: int = 64
    context_scales: tuple[float, ...] = (2.0, 4.0, 8.0)  # fixed Gaussian-pyramid sigmas in cells; empty disables

    @property
    def latent_dim(self) -> int:
        """Channels read by the decoder: learned latent plus the fixed context branch."""
        return self.d_latent + 3 * self.obs_channels * len(self.context_scales)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["enc_dilations"] = tuple(d["enc_dilations"])
        d["context_scales"] = tuple(d.get("context_scales", ()))
        return cls(**d)


ENCODER_PARAMS = ("enc.w1", "enc.b1", "enc.w2", "enc.b2")


def init_params(cfg: ModelConfig, rng=0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(rng)
    d, k = cfg.d_model, cfg.enc_kernel

    def lin(fan_in, fan_out, gain=1.0):
        return rng.normal(0.0, gain / np.sqrt(fan_in), (fan_in, fan_out))

    p = {
        "enc.w1": rng.normal(0, 1 / np.sqrt(cfg.obs_channels * k * k), (cfg.enc_hidden, cfg.obs_channels, k, k)),
        "enc.b1": np.zeros(cfg.enc_hidden),
        "enc.w2": rng.normal(0, 1 / np.sqrt(cfg.enc_hidden * k * k), (cfg.d_latent, cfg.enc_hidden, k, k)),
        "enc.b2": np.zeros(cfg.d_latent),
        "in.w": lin(2 * cfg.n_points, d),
        "in.b": np.zeros(d),
        "time.w1": lin(d, d),
        "time.b1": np.zeros(d),
        "time.w2": lin(d, d),
        "time.b2": np.zeros(d),
        "cls.w": lin(d, NO_OBJECT + 1, 0.1),
        "cls.b": np.zeros(NO_OBJECT + 1),
    }
    for i in range(cfg.n_layers):
        pre = f"dec{i}."
        for name in ("q", "k", "v", "o"):
            p[pre + "attn." + name + ".w"] = lin(d, d)
            p[pre + "attn." + name + ".b"] = np.zeros(d)
        p[pre + "cross.w1"] = lin(cfg.n_points * cfg.latent_dim, d)
        p[pre + "cross.b1"] = np.zeros(d)
        p[pre + "cross.w2"] = lin(d, d)
        p[pre + "cross.b2"] = np.zeros(d)
        p[pre + "ffn.w1"] = lin(d, cfg.d_ff)
        p[pre + "ffn.b1"] = np.zeros(cfg.d_ff)
        p[pre + "ffn.w2"] = lin(cfg.d_ff, d)
        p[pre + "ffn.b2"] = np.zeros(d)
        for j in (1, 2, 3):
            p[pre + f"ln{j}.g"] = np.ones(d)
            p[pre + f"ln{j}.b"] = np.zeros(d)
        if cfg.n_offsets:
            m = cfg.n_offsets
            ang = 2 * np.pi * np.arange(m - 1) / max(1, m - 1)
            ring = np.concatenate([[[0.0, 0.0]], cfg.offset_radius * np.stack([np.cos(ang), np.sin(ang)], 1)])
            p[pre + "off.w"] = lin(d, cfg.n_points * m * 2, 0.01)
            p[pre + "off.b"] = np.tile(ring.ravel(), cfg.n_points)
            p[pre + "offatt.w"] = lin(d, cfg.n_points * m, 0.01)
            p[pre + "offatt.b"] = np.zeros(cfg.n_points * m)
        if cfg.point_head:
            dp = cfg.d_point
            p[pre + "phead.wq"] = lin(d, dp)
            p[pre + "phead.wf"] = lin(cfg.latent_dim, dp)
            p[pre + "phead.emb"] = rng.normal(0.0, 1.0, (cfg.n_points, dp))
            p[pre + "phead.b"] = np.zeros(dp)
            p[pre + "phead.wo"] = lin(dp, 2, 0.01)
            p[pre + "phead.bo"] = np.zeros(2)
        else:
            p[pre + "head.w"] = lin(d, 2 * cfg.n_points, 0.01)
            p[pre + "head.b"] = np.zeros(2 * cfg.n_points)
    return {name: v.astype(dtype) for name, v in p.items()}


def timestep_embedding(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = float(t) * freqs
    return np.concatenate([np.sin(args), np.cos(args)])


_CONTEXT_CACHE: OrderedDict = OrderedDict()
CONTEXT_CACHE_SIZE = 512  # observations; about 0.7 MB each at three scales


def cached_context_features(obs: np.ndarray, scales) -> np.ndarray:
    """context_features memoized by observation content (training revisits each scene every epoch)."""
    obs = np.ascontiguousarray(obs)
    key = (hashlib.blake2b(obs.tobytes(), digest_size=16).digest(), obs.shape, str(obs.dtype), tuple(scales))
    hit = _CONTEXT_CACHE.get(key)
    if hit is not None:
        _CONTEXT_CACHE.move_to_end(key)
        return hit
    feats = context_features(obs, scales)
    feats.setflags(write=False)
    _CONTEXT_CACHE[key] = feats
    if len(_CONTEXT_CACHE) > CONTEXT_CACHE_SIZE:
        _CONTEXT_CACHE.popitem(last=False)
    return feats


def context_features(obs: np.ndarray, scales) -> np.ndarray:
    """Parameter-free multi-scale context: blurred observation and its sigma-scaled gradients.

    Gives every cell the direction toward evidence up to a few sigma away, beyond the
    reach of the two learned conv layers.
    """
    out = []
    for sigma in scales:
        gain = np.sqrt(2 * np.pi) * sigma  # a unit-mass line peaks near 1 at every scale
        for ch in np.asarray(obs, dtype=float):
            out.append(gain * gaussian_filter(ch, sigma, mode="constant"))
            out.append(gain * sigma * gaussian_filter(ch, sigma, order=(1, 0), mode="constant"))
            out.append(gain * sigma * gaussian_filter(ch, sigma, order=(0, 1), mode="constant"))
    return np.stack(out)


def skip_scale(alpha_bar: float, sigma_data: float) -> float:
    """Linear MMSE weight of x_t for predicting x_0 when x_0 has std `sigma_data`."""
    v = sigma_data**2
    return float(np.sqrt(alpha_bar) * v / (alpha_bar * v + 1.0 - alpha_bar))


class DenoiserModel:
    """Parameters plus the forward passes; inference helpers work on plain arrays."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray], schedule: NoiseSchedule):
        self.cfg = cfg
        self.schedule = schedule
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
        self.encode_calls = 0

    @classmethod
    def create(cls, cfg: ModelConfig, schedule: NoiseSchedule, seed=0, dtype=np.float32) -> "DenoiserModel":
        return cls(cfg, init_params(cfg, seed, dtype), schedule)

    @property
    def dtype(self):
        return self.params["in.w"].data.dtype

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    # -- graph-building passes -------------------------------------------------

    def encoder_forward(self, obs) -> Tensor:
        p = self.params
        d1, d2 = self.cfg.enc_dilations
        x = ad.as_tensor(np.asarray(obs, dtype=self.dtype))
        h = ad.silu(ad.conv2d(x, p["enc.w1"], p["enc.b1"], d1))
        lat = ad.conv2d(h, p["enc.w2"], p["enc.b2"], d2)
        if not self.cfg.context_scales:
            return lat
        ctx = cached_context_features(x.data, self.cfg.context_scales).astype(self.dtype)
        return ad.concat([lat, ad.as_tensor(ctx)], axis=0)

    def _to_cells(self, z) -> Tensor:
        """Diffused-state points -> fractional (row, col) cell-center coordinates."""
        H, W = self.cfg.grid_h, self.cfg.grid_w
        sc = self.schedule.signal_scale
        scale = np.array([-H / (2.0 * sc), -W / (2.0 * sc)], dtype=self.dtype)
        offset = np.array([H / 2.0 - 0.5, W / 2.0 - 0.5], dtype=self.dtype)
        return ad.add(ad.mul(z, scale), offset)

    def _attention(self, q: Tensor, pre: str) -> Tensor:
        p = self.params
        l, d = q.shape
        nh = self.cfg.n_heads
        dh = d // nh

        def heads(x):
            return ad.transpose(ad.reshape(x, (l, nh, dh)), (1, 0, 2))

        Q = heads(q @ p[pre + "q.w"] + p[pre + "q.b"])
        K = heads(q @ p[pre + "k.w"] + p[pre + "k.b"])
        V = heads(q @ p[pre + "v.w"] + p[pre + "v.b"])
        att = ad.softmax(ad.mul(Q @ ad.transpose(K, (0, 2, 1)), 1.0 / np.sqrt(dh)), axis=-1)
        out = ad.reshape(ad.transpose(att @ V, (1, 0, 2)), (l, d))
        return out @ p[pre + "o.w"] + p[pre + "o.b"]

    def _read(self, latent: Tensor, q: Tensor, at: Tensor, pre: str) -> Tensor:
        """Latent features at each point, (l, N_P, D); optionally pooled over learned offsets."""
        cells = self._to_cells(at)
        m = self.cfg.n_offsets
        if not m:
            return ad.grid_sample(latent, cells)
        p = self.params
        l, n_p = at.shape[:2]
        off = ad.reshape(q @ p[pre + "off.w"] + p[pre + "off.b"], (l, n_p, m, 2))
        w = ad.softmax(ad.reshape(q @ p[pre + "offatt.w"] + p[pre + "offatt.b"], (l, n_p, m)), axis=-1)
        feats = ad.grid_sample(latent, ad.reshape(cells, (l, n_p, 1, 2)) + off)  # (l, N_P, M, D)
        return ad.sum_(ad.mul(feats, ad.reshape(w, (l, n_p, m, 1))), axis=2)

    def decoder_forward(self, x_t: np.ndarray, t: int, latent: Tensor) -> tuple[Tensor, Tensor]:
        refs, logits = self.decoder_layers(x_t, t, latent)
        return refs[-1], logits

    def decoder_layers(self, x_t: np.ndarray, t: int, latent: Tensor) -> tuple[list[Tensor], Tensor]:
        """Like decoder_forward but returns every layer's x0 estimate."""
        cfg, p = self.cfg, self.params
        x_t = np.asarray(x_t, dtype=self.dtype)
        l, n_p = x_t.shape[:2]
        ab = float(self.schedule.alpha_bar[int(t)])
        temb = timestep_embedding(t, cfg.d_model).astype(self.dtype)[None]
        te = ad.silu(ad.as_tensor(temb) @ p["time.w1"] + p["time.b1"]) @ p["time.w2"] + p["time.b2"]
        sc = self.schedule.signal_scale
        q = ad.as_tensor(x_t.reshape(l, 2 * n_p) / sc) @ p["in.w"] + p["in.b"] + te
        ref = ad.as_tensor((skip_scale(ab, sc * cfg.sigma_data) * x_t).astype(self.dtype))
        read_at = ad.as_tensor(x_t)
        refs = []
        for i in range(cfg.n_layers):
            pre = f"dec{i}."
            q = ad.layer_norm(q + self._attention(q, pre + "attn."), p[pre + "ln1.g"], p[pre + "ln1.b"])
            point_feats = self._read(latent, q, read_at, pre)  # (l, N_P, D)
            feats = ad.reshape(point_feats, (l, n_p * cfg.latent_dim))
            mix = ad.silu(feats @ p[pre + "cross.w1"] + p[pre + "cross.b1"]) @ p[pre + "cross.w2"] + p[pre + "cross.b2"]
            q = ad.layer_norm(q + mix, p[pre + "ln2.g"], p[pre + "ln2.b"])
            ff = ad.silu(q @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"]) @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"]
            q = ad.layer_norm(q + ff, p[pre + "ln3.g"], p[pre + "ln3.b"])
            if cfg.point_head:
                hq = ad.reshape(q @ p[pre + "phead.wq"], (l, 1, cfg.d_point))
                h = ad.silu(hq + point_feats @ p[pre + "phead.wf"] + p[pre + "phead.emb"] + p[pre + "phead.b"])
                delta = h @ p[pre + "phead.wo"] + p[pre + "phead.bo"]
            else:
                delta = ad.reshape(q @ p[pre + "head.w"] + p[pre + "head.b"], (l, n_p, 2))
            ref = ref + (delta if sc == 1.0 else ad.mul(delta, sc))
            refs.append(ref)
            read_at = ref
        logits = q @ p["cls.w"] + p["cls.b"]
        return refs, logits

    # -- inference helpers -------------------------------------------------------

    def encode(self, obs) -> np.ndarray:
        with ad.no_grad():
            lat = self.encoder_forward(obs).data
        if not np.all(np.isfinite(lat)):
            raise FloatingPointError("numeric overflow")
        self.encode_calls += 1
        return lat

    def denoise(self, x_t: np.ndarray, t: int, latent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        with ad.no_grad():
            x0, logits = self.decoder_forward(x_t, t, ad.as_tensor(np.asarray(latent, dtype=self.dtype)))
        if not (np.all(np.isfinite(x0.data)) and np.all(np.isfinite(logits.data))):
            raise FloatingPointError("numeric overflow")
        return x0.data.astype(float), logits.data.astype(float)

    __call__ = denoise

    # -- persistence ---------------------------------------------------------------

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        header = {
            "version": CHECKPOINT_VERSION,
            "model": asdict(self.cfg),
            "schedule": {"kind": self.schedule.kind, "T": self.schedule.T, "s": self.schedule.s,
                         "signal_scale": self.schedule.signal_scale,
                         "fingerprint": self.schedule.fingerprint()},
            "shapes": {k: list(v.data.shape) for k, v in self.params.items()},
            "dtype": str(self.dtype),
            "extra": extra or {},
        }
        path = Path(path)
        with path.open("wb") as fh:
            blob = json.dumps(header, sort_keys=True).encode()
            fh.write(b"VMDCKPT1")
            fh.write(len(blob).to_bytes(8, "little"))
            fh.write(blob)
            for k in sorted(self.params):
                fh.write(np.ascontiguousarray(self.params[k].data).tobytes())

    @classmethod
    def load(cls, path: str | Path, schedule: NoiseSchedule | None = None) -> "DenoiserModel":
        from .diffusion import build_cosine_schedule

        raw = Path(path).read_bytes()
        if raw[:8] != b"VMDCKPT1":
            raise ValueError("not a checkpoint file")
        n = int.from_bytes(raw[8:16], "little")
        header = json.loads(raw[16:16 + n])
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        sched_info = header["schedule"]
        if schedule is None:
            schedule = build_cosine_schedule(sched_info["T"], sched_info["s"], sched_info.get("signal_scale", 1.0))
        if schedule.fingerprint() != sched_info["fingerprint"]:
            raise ValueError("schedule fingerprint mismatch")
        cfg = ModelConfig.from_dict(header["model"])
        dtype = np.dtype(header["dtype"])
        expected = {k: tuple(v.shape) for k, v in init_params(cfg, 0, dtype).items()}
        shapes = {k: tuple(v) for k, v in header["shapes"].items()}
        if shapes != expected:
            raise ValueError("parameter shape table does not match the model config")
        params, off = {}, 16 + n
        for k in sorted(shapes):
            size = int(np.prod(shapes[k])) * dtype.itemsize
            params[k] = np.frombuffer(raw[off:off + size], dtype=dtype).reshape(shapes[k]).copy()
            off += size
        model = cls(cfg, params, schedule)
        model.checkpoint_extra = header.get("extra", {})
        return model


@dataclass
class LossParts:
    total: Tensor
    line: float
    cls: float


def _line_loss(x0_hat: Tensor, targets: QuerySet) -> Tensor:
    mask = targets.from_gt.astype(x0_hat.data.dtype)[:, None, None]
    n_gt = int(targets.from_gt.sum())
    target = np.asarray(targets.coords, dtype=x0_hat.data.dtype)
    if n_gt:
        resid = ad.abs_(x0_hat - target)
        line = ad.mul(ad.sum_(ad.mul(resid, mask)), 1.0 / (n_gt * target.shape[1] * target.shape[2]))
    else:
        line = ad.Tensor(np.zeros((), dtype=x0_hat.data.dtype))
    return line


def loss_fn(x0_hat: Tensor, logits: Tensor, targets: QuerySet, lambda_cls: float = 0.5,
            aux: list[Tensor] = ()) -> LossParts:
    """Mean L1 over GT-derived queries plus weighted cross-entropy over all queries.

    `aux` holds earlier-layer x0 estimates; their L1 terms are added to the total
    but the reported line loss is the final layer's alone.
    """
    line = _line_loss(x0_hat, targets)
    total_line = line
    for a in aux:
        total_line = total_line + _line_loss(a, targets)
    ce = ad.cross_entropy(logits, targets.class_targets)
    total = total_line + ad.mul(ce, lambda_cls)
    return LossParts(total, float(line.data), float(ce.data))


def match_targets(x0_hat: np.ndarray, logits: np.ndarray, targets: QuerySet, cls_weight: float = 0.5,
                  reversible: bool = True) -> QuerySet:
    """Reassign GT polylines to queries by minimum-cost bipartite matching.

    Cost of query i for GT j: mean L1 between the query's x0 estimate and the GT
    points (the cheaper of both point orders when `reversible`), minus
    `cls_weight` times the query's probability for the GT class. Unmatched
    queries become no-object. Returns targets in the queries' own order.
    """
    gt_idx = np.nonzero(targets.from_gt)[0]
    l = len(targets.from_gt)
    coords = np.array(targets.coords, dtype=float)
    classes = np.full(l, NO_OBJECT, dtype=np.int64)
    from_gt = np.zeros(l, dtype=bool)
    if not len(gt_idx):
        return QuerySet(coords, from_gt, classes)
    gt = coords[gt_idx]
    gt_cls = targets.class_targets[gt_idx]
    x0 = np.asarray(x0_hat, dtype=float)
    fwd = np.abs(x0[:, None] - gt[None]).mean(axis=(2, 3))
    rev = np.abs(x0[:, None] - gt[None, :, ::-1]).mean(axis=(2, 3)) if reversible else np.full_like(fwd, np.inf)
    z = logits - logits.max(axis=1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    cost = np.minimum(fwd, rev) - cls_weight * prob[:, gt_cls]
    rows, cols = linear_sum_assignment(cost)
    for q, j in zip(rows, cols):
        coords[q] = gt[j][::-1] if rev[q, j] < fwd[q, j] else gt[j]
        classes[q] = gt_cls[j]
        from_gt[q] = True
    return QuerySet(coords, from_gt, classes)


@dataclass
class ForwardCache:
    latent: Tensor
    x0_hat: Tensor
    logits: Tensor
    loss: LossParts = field(default=None)


def forward_and_loss(model: DenoiserModel, obs, x_t, t, targets: QuerySet, lambda_cls=0.5,
                     deep_supervision: bool = False, matching: bool = False) -> ForwardCache:
    """Full training loss. With `matching`, targets are reassigned to queries by
    bipartite matching on the final-layer estimate; otherwise each query keeps the
    GT it was noised from."""
    latent = model.encoder_forward(obs)
    x0_hat, logits, loss = decoder_loss(model, latent, x_t, t, targets, lambda_cls, deep_supervision, matching)
    return ForwardCache(latent, x0_hat, logits, loss)


def decoder_loss(model: DenoiserModel, latent: Tensor, x_t, t, targets: QuerySet, lambda_cls=0.5,
                 deep_supervision: bool = False, matching: bool = False) -> tuple[Tensor, Tensor, LossParts]:
    """Decoder pass and loss on a given latent (lets several noised query sets share one encoding)."""
    refs, logits = model.decoder_layers(x_t, t, latent)
    sc = model.schedule.signal_scale
    if sc != 1.0:  # the line loss is measured in unscaled signal units
        refs = [ad.mul(r, 1.0 / sc) for r in refs]
    if matching:
        targets = match_targets(refs[-1].data, logits.data, targets)
    aux = refs[:-1] if deep_supervision else ()
    return refs[-1], logits, loss_fn(refs[-1], logits, targets, lambda_cls, aux)
