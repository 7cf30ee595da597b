"""Small fully-convolutional segmenter with class-wise attention masking.

The trunk is a stack of 3x3 convolutions with ReLU; its output is sliced
evenly into one feature branch per class. Each branch owns a 1x1 attention
head whose logistic output gates the branch spatially before a 1x1 score
head produces that class's score channel. Forward and backward passes are
written by hand in numpy and verified against central finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "boxseg-checkpoint"
CHECKPOINT_VERSION = 1

MASKING_MODES = ("off", "classwise", "global")


@dataclass(frozen=True)
class Architecture:
    """Network shape. The last trunk layer must emit n_classes * branch_width
    channels so the feature stack slices evenly into class branches.

    The default trunk is six 3x3 convolutions with stride 2 at the first:
    receptive field 23 pixels at feature stride 2, enough to see across the
    synthetic objects (16-22 px) whose class is defined by shape alone.
    """

    in_channels: int = 1
    n_classes: int = 4
    branch_width: int = 8
    trunk: tuple[tuple[int, int], ...] = ((16, 2), (32, 1), (32, 1), (32, 1), (32, 1), (32, 1))
    masking: str = "classwise"

    def __post_init__(self):
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.n_classes < 2:
            raise ValueError(f"need at least background + 1 class, got n_classes={self.n_classes}")
        if self.masking not in MASKING_MODES:
            raise ValueError(f"unknown masking mode {self.masking!r}; valid: {MASKING_MODES}")
        if not self.trunk:
            raise ValueError("trunk must have at least one layer")
        for ch, stride in self.trunk:
            if ch < 1 or stride < 1 or (stride & (stride - 1)) != 0:
                raise ValueError(f"trunk layer ({ch}, {stride}): channels >= 1 and power-of-2 stride required")
        if self.trunk[-1][0] != self.n_classes * self.branch_width:
            raise ValueError(
                f"last trunk layer has {self.trunk[-1][0]} channels, expected "
                f"n_classes * branch_width = {self.n_classes * self.branch_width}"
            )

    @property
    def feature_stride(self) -> int:
        s = 1
        for _, stride in self.trunk:
            s *= stride
        return s

    @property
    def n_attention_heads(self) -> int:
        return 1 if self.masking == "global" else self.n_classes

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "n_classes": self.n_classes,
            "branch_width": self.branch_width,
            "trunk": [list(t) for t in self.trunk],
            "masking": self.masking,
        }

    @staticmethod
    def from_dict(d: dict) -> "Architecture":
        return Architecture(
            in_channels=d["in_channels"],
            n_classes=d["n_classes"],
            branch_width=d["branch_width"],
            trunk=tuple((c, s) for c, s in d["trunk"]),
            masking=d["masking"],
        )


def default_architecture(n_classes: int, in_channels: int = 1, branch_width: int = 8,
                         masking: str = "classwise") -> Architecture:
    return Architecture(
        in_channels=in_channels,
        n_classes=n_classes,
        branch_width=branch_width,
        trunk=((16, 2), (32, 1), (32, 1), (32, 1), (32, 1), (n_classes * branch_width, 1)),
        masking=masking,
    )


class ModelState:
    """Learnable tensors plus parallel gradient and momentum buffers."""

    def __init__(self, arch: Architecture, params: dict[str, np.ndarray]):
        self.arch = arch
        self.params = params
        self.grads = {k: np.zeros_like(v) for k, v in params.items()}
        self.momenta = {k: np.zeros_like(v) for k, v in params.items()}

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0

    def cast(self, dtype) -> "ModelState":
        return ModelState(self.arch, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "ModelState":
        clone = ModelState(self.arch, {k: v.copy() for k, v in self.params.items()})
        clone.momenta = {k: v.copy() for k, v in self.momenta.items()}
        return clone

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def param_names(self) -> list[str]:
        return list(self.params)


def init_model(arch: Architecture, seed: int, dtype=np.float32) -> ModelState:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    c_in = arch.in_channels
    for i, (c_out, _) in enumerate(arch.trunk):
        fan_in = c_in * 9
        params[f"conv{i}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, 3, 3)).astype(dtype)
        params[f"conv{i}.b"] = np.zeros(c_out, dtype=dtype)
        c_in = c_out
    n, d = arch.n_classes, arch.branch_width
    if arch.masking == "global":
        att_shape, att_fan = (1, n * d), n * d
    else:
        att_shape, att_fan = (n, d), d
    params["att.w"] = rng.normal(0.0, np.sqrt(2.0 / att_fan), size=att_shape).astype(dtype)
    params["att.b"] = np.zeros(att_shape[0], dtype=dtype)
    params["score.w"] = rng.normal(0.0, np.sqrt(2.0 / d), size=(n, d)).astype(dtype)
    params["score.b"] = np.zeros(n, dtype=dtype)
    return ModelState(arch, params)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _im2col(x: np.ndarray, stride: int):
    """(B, C, H, W) -> (B, C*9, OH*OW) patches of the zero-padded input.

    Built by nine contiguous slab copies; the layout feeds batched matmuls
    directly with weights flattened as (F, C*9).
    """
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    oh = (h - 1) // stride + 1
    ow = (w - 1) // stride + 1
    cols = np.empty((b, c, 9, oh, ow), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki * 3 + kj] = xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]
    return cols.reshape(b, c * 9, oh * ow), oh, ow


def _conv_forward(x, w, bias, stride):
    b = x.shape[0]
    f, c = w.shape[0], w.shape[1]
    cols, oh, ow = _im2col(x, stride)
    y = np.matmul(w.reshape(f, c * 9)[None], cols) + bias[:, None]
    return y.reshape(b, f, oh, ow), cols


def _conv_backward(dy, cols, w, x_shape, stride):
    b, f, oh, ow = dy.shape
    c = w.shape[1]
    dyf = dy.reshape(b, f, oh * ow)
    dw = np.einsum("bfp,bcp->fc", dyf, cols, optimize=True).reshape(f, c, 3, 3)
    db = dy.sum(axis=(0, 2, 3))
    dcols = np.matmul(w.reshape(f, c * 9).T[None], dyf).reshape(b, c, 9, oh, ow)
    h, w_in = x_shape[2], x_shape[3]
    dxp = np.zeros((b, c, h + 2, w_in + 2), dtype=dy.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += dcols[:, :, ki * 3 + kj]
    return dw, db, dxp[:, :, 1:h + 1, 1:w_in + 1]


@dataclass
class Activations:
    """Everything forward caches for backward."""

    images: np.ndarray
    masking_enabled: bool
    cols: list = field(default_factory=list)          # per trunk layer
    relu_masks: list = field(default_factory=list)    # per trunk layer, bool
    layer_input_shapes: list = field(default_factory=list)
    features: np.ndarray | None = None                # (B, N*D, h, w), post-ReLU
    alpha: np.ndarray | None = None                   # (B, A, h, w) in (0, 1)
    scores: np.ndarray | None = None                  # (B, N, h, w)

    @property
    def phi(self) -> np.ndarray:
        """Masked branches (B, N, D, h, w), recomputed from cached tensors."""
        b, nd, h, w = self.features.shape
        n = self.scores.shape[1]
        fb = self.features.reshape(b, n, nd // n, h, w)
        return fb * self.alpha[:, :, None]


def forward(state: ModelState, images: np.ndarray, masking_enabled: bool | None = None) -> Activations:
    """Run the network on a (B, C, H, W) batch. With masking disabled the
    score heads read the raw branches instead of the attention-gated ones."""
    arch = state.arch
    if masking_enabled is None:
        masking_enabled = arch.masking != "off"
    if images.ndim != 4 or images.shape[1] != arch.in_channels:
        raise ValueError(f"expected images (B, {arch.in_channels}, H, W), got {images.shape}")
    s = arch.feature_stride
    if images.shape[2] % s or images.shape[3] % s:
        raise ValueError(f"image size {images.shape[2:]} not divisible by feature stride {s}")

    dtype = state.dtype
    x = images.astype(dtype, copy=False)
    acts = Activations(images=x, masking_enabled=masking_enabled)
    for i, (_, stride) in enumerate(arch.trunk):
        acts.layer_input_shapes.append(x.shape)
        y, cols = _conv_forward(x, state.params[f"conv{i}.w"], state.params[f"conv{i}.b"], stride)
        mask = y > 0
        x = y * mask
        acts.cols.append(cols)
        acts.relu_masks.append(mask)
    acts.features = x

    b, nd, h, w = x.shape
    n, d = arch.n_classes, arch.branch_width
    fb = x.reshape(b, n, d, h, w)
    if arch.masking == "global":
        z = np.einsum("k,bkhw->bhw", state.params["att.w"][0], x) + state.params["att.b"][0]
        acts.alpha = _sigmoid(z)[:, None]
    else:
        z = np.einsum("nd,bndhw->bnhw", state.params["att.w"], fb) + state.params["att.b"][None, :, None, None]
        acts.alpha = _sigmoid(z)

    branches = fb * acts.alpha[:, :, None] if masking_enabled else fb
    acts.scores = (
        np.einsum("nd,bndhw->bnhw", state.params["score.w"], branches)
        + state.params["score.b"][None, :, None, None]
    )
    return acts


def backward(state: ModelState, acts: Activations, d_scores: np.ndarray, d_alpha: np.ndarray | None = None):
    """Accumulate parameter gradients for upstream d_scores (B, N, h, w) and an
    optional external d_alpha (B, A, h, w); the masking node routes gradients
    into both the branch features and the attention maps."""
    if acts.features is None:
        raise ValueError("backward called without cached forward activations")
    arch = state.arch
    b, nd, h, w = acts.features.shape
    n, d = arch.n_classes, arch.branch_width
    fb = acts.features.reshape(b, n, d, h, w)
    d_scores = d_scores.astype(state.dtype, copy=False)

    if acts.masking_enabled:
        alpha_b = acts.alpha[:, :, None]  # broadcasts over branch dim (and classes when global)
        phi = fb * alpha_b
        state.grads["score.w"] += np.einsum("bnhw,bndhw->nd", d_scores, phi)
    else:
        state.grads["score.w"] += np.einsum("bnhw,bndhw->nd", d_scores, fb)
    state.grads["score.b"] += d_scores.sum(axis=(0, 2, 3))
    d_branches = np.einsum("nd,bnhw->bndhw", state.params["score.w"], d_scores)

    if acts.masking_enabled:
        dfb = d_branches * alpha_b
        prod = d_branches * fb
        if arch.masking == "global":
            d_alpha_mask = prod.sum(axis=(1, 2))[:, None]
        else:
            d_alpha_mask = prod.sum(axis=2)
    else:
        dfb = d_branches
        d_alpha_mask = None

    d_alpha_total = d_alpha_mask
    if d_alpha is not None:
        d_alpha = d_alpha.astype(state.dtype, copy=False)
        d_alpha_total = d_alpha if d_alpha_total is None else d_alpha_total + d_alpha

    if d_alpha_total is not None:
        dz = d_alpha_total * acts.alpha * (1.0 - acts.alpha)
        if arch.masking == "global":
            state.grads["att.w"][0] += np.einsum("bhw,bkhw->k", dz[:, 0], acts.features)
            state.grads["att.b"][0] += dz.sum()
            dfb = dfb + (state.params["att.w"][0][None, :, None, None] * dz[:, 0:1]).reshape(b, n, d, h, w)
        else:
            state.grads["att.w"] += np.einsum("bnhw,bndhw->nd", dz, fb)
            state.grads["att.b"] += dz.sum(axis=(0, 2, 3))
            dfb = dfb + np.einsum("nd,bnhw->bndhw", state.params["att.w"], dz)

    dx = dfb.reshape(b, nd, h, w)
    for i in reversed(range(len(arch.trunk))):
        dx = dx * acts.relu_masks[i]
        dw, db, dx = _conv_backward(
            dx, acts.cols[i], state.params[f"conv{i}.w"], acts.layer_input_shapes[i], arch.trunk[i][1]
        )
        state.grads[f"conv{i}.w"] += dw
        state.grads[f"conv{i}.b"] += db


def sgd_step(state: ModelState, lr: float, momentum: float, batch_size: int):
    """v <- momentum * v + g / batch_size; w <- w - lr * v; gradients cleared."""
    for name, g in state.grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name}; training aborted")
        v = state.momenta[name]
        v *= momentum
        v += g / batch_size
        state.params[name] -= lr * v
    state.zero_grads()


def downsample_box_masks(boxes, n_classes: int, height: int, width: int, stride: int) -> np.ndarray:
    """Binary per-class masks at feature resolution: a cell is set when its
    stride x stride footprint intersects any box of that class; the background
    mask is the complement of the union."""
    if height % stride or width % stride:
        raise ValueError(f"stride {stride} does not divide image size ({height}, {width})")
    hf, wf = height // stride, width // stride
    masks = np.zeros((n_classes, hf, wf), dtype=np.float32)
    for b in boxes:
        y0, y1 = b.y0 // stride, -(-b.y1 // stride)
        x0, x1 = b.x0 // stride, -(-b.x1 // stride)
        masks[b.class_id, y0:y1, x0:x1] = 1.0
    masks[0] = 1.0 - masks[1:].max(axis=0) if n_classes > 1 else 1.0
    return masks


def grad_check(state: ModelState, loss_fn, eps: float = 1e-3, param_names=None, loss_only_fn=None) -> float:
    """Compare analytic gradients against central finite differences.

    loss_fn(state) must return (loss, grads_dict) and be deterministic; an
    optional loss_only_fn(state) -> loss skips the gradient work during the
    finite-difference evaluations. The check runs on a float64 copy of the
    state; returns the maximum over all checked elements of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    work = state.cast(np.float64)
    _, grads = loss_fn(work)
    fd_loss = loss_only_fn if loss_only_fn is not None else (lambda s: loss_fn(s)[0])
    names = param_names if param_names is not None else work.param_names()
    worst = 0.0
    for name in names:
        theta = work.params[name]
        flat = theta.reshape(-1)
        gflat = grads[name].reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            lp = fd_loss(work)
            flat[idx] = orig - eps
            lm = fd_loss(work)
            flat[idx] = orig
            numeric = (lp - lm) / (2.0 * eps)
            analytic = gflat[idx]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints: one JSON header line (version, architecture, tensor shapes)
# followed by raw little-endian float32 tensor data in header order.

def save_checkpoint(state: ModelState, path: str | Path, meta: dict | None = None):
    tensors = [[name, list(state.params[name].shape)] for name in state.param_names()]
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": state.arch.to_dict(),
        "tensors": tensors,
        "dtype": "<f4",
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for name in state.param_names():
            f.write(np.ascontiguousarray(state.params[name], dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelState, dict]:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: not a checkpoint (missing header)")
    header = json.loads(data[:nl].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    arch = Architecture.from_dict(header["arch"])
    offset = nl + 1
    params = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        buf = data[offset:offset + 4 * count]
        if len(buf) != 4 * count:
            raise ValueError(f"{path}: truncated tensor data for {name}")
        params[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)
        offset += 4 * count
    return ModelState(arch, params), header.get("meta", {})
