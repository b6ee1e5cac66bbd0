"""Model construction, auxiliary-classifier pretraining, SGD training, evaluation.

Variants
--------
``baseline``    FC x L -> softmax
``eigen_dmoe``  FC x L -> EigenMoE -> EigenMoE -> affine -> softmax
``mixnet1``     ContextualMoE -> FC x L -> softmax
``mixnet2/3``   ContextualMoE -> FC x L (last linear) -> GatedMoE(lowrank) -> affine -> softmax
``mixnet4``     ContextualMoE -> FC x L (last linear) -> GatedMoE(banded) -> affine -> softmax

The contextual MoE is gated by an auxiliary broad-class classifier that is
pretrained and, by default, frozen during joint training.
"""
from __future__ import annotations

import dataclasses
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .features import FeaturePipeline, LdaTransform, splice
from .layers import (
    Affine,
    ContextAffine,
    ContextualMoELayer,
    EigenMoELayer,
    GatedMoELayer,
    LayerStack,
    Relu,
    softmax,
)
from .linalg import ShapeError, make_rng
from .synth import FrameDataset

__all__ = [
    "VARIANTS",
    "ModelConfig",
    "TrainConfig",
    "Model",
    "TrainingDiverged",
    "TrainReport",
    "EvalReport",
    "build_model",
    "build_stack",
    "build_collapse_reference",
    "copy_collapse_params",
    "contextual_moe_param_count",
    "fit_pipeline",
    "model_inputs",
    "pretrain_aux",
    "train",
    "evaluate",
    "nearest_mean_accuracy",
    "save_checkpoint",
    "load_checkpoint",
    "CKPT_MAGIC",
]

VARIANTS = ("baseline", "eigen_dmoe", "mixnet1", "mixnet2", "mixnet3", "mixnet4")
CKPT_MAGIC = b"MIXNET-CKPT v1"


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite; the message names epoch and batch."""


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "mixnet4"
    n_classes: int = 45
    frame_dim: int = 26
    feature_context: int = 0
    use_lda: bool = True
    hidden_layers: int = 4
    hidden_width: int = 128
    moe_context: int = 1
    n_gate_classes: int = 3
    n_output_experts: int = 5
    expert_structure: str = "banded"
    lowrank_dim: int = 24
    band: int = 7
    eigen_experts: int = 9
    eigen_width: int = 64
    aux_layers: int = 3
    aux_width: int = 64

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.expert_structure not in ("full", "lowrank", "banded"):
            raise ValueError(f"unknown expert structure {self.expert_structure!r}")
        for name in ("n_classes", "frame_dim", "hidden_layers", "hidden_width", "n_gate_classes",
                     "eigen_experts", "eigen_width", "aux_layers", "aux_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.feature_context < 0 or self.moe_context < 0:
            raise ValueError("context radii must be >= 0")
        if self.has_output_moe and self.n_output_experts < 1:
            raise ValueError(f"{self.variant} needs n_output_experts >= 1")
        if self.has_output_moe and self.expert_structure == "lowrank" and not self.lowrank_dim < self.hidden_width:
            raise ValueError("lowrank_dim must be smaller than hidden_width")
        if self.has_output_moe and self.expert_structure == "banded" and not 0 <= self.band < self.hidden_width:
            raise ValueError("band must lie in [0, hidden_width)")

    @classmethod
    def preset(cls, variant: str, **overrides) -> "ModelConfig":
        """Desk-scale defaults for one variant.

        The baseline gets one more hidden layer than the MoE variants so that
        it carries at least as many parameters as MixNet-II/III/IV.  MixNet
        variants splice no context in the front end because the contextual
        MoE adds ``+-1``; the baseline splices ``+-1`` so both see three frames.
        """
        base = dict(variant=variant)
        if variant == "baseline":
            base.update(feature_context=1, hidden_layers=5, n_output_experts=0)
        elif variant == "eigen_dmoe":
            base.update(feature_context=1, n_output_experts=0)
        elif variant == "mixnet1":
            base.update(n_output_experts=0)
        elif variant == "mixnet2":
            base.update(n_output_experts=3, expert_structure="lowrank")
        elif variant == "mixnet3":
            base.update(n_output_experts=5, expert_structure="lowrank")
        elif variant == "mixnet4":
            base.update(n_output_experts=5, expert_structure="banded")
        else:
            raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        base.update(overrides)
        return cls(**base)

    @property
    def is_mixnet(self) -> bool:
        return self.variant.startswith("mixnet")

    @property
    def has_output_moe(self) -> bool:
        return self.variant in ("mixnet2", "mixnet3", "mixnet4")

    @property
    def feature_dim(self) -> int:
        """Dimension of ``x(t)`` after splicing and LDA."""
        return self.frame_dim * (2 * self.feature_context + 1)

    @property
    def input_dim(self) -> int:
        width = 2 * self.moe_context + 1 if self.is_mixnet else 1
        return self.feature_dim * width

    @property
    def expert_out_dim(self) -> int:
        return self.lowrank_dim if self.expert_structure == "lowrank" else self.hidden_width

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 128
    learning_rate: float = 0.05
    halving_factor: float = 0.5
    min_improvement: float = 0.001
    seed: int = 42
    shuffle: bool = True
    threads: int = 1
    aux_epochs: int = 5
    unfreeze_aux: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.aux_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1 or self.threads < 1:
            raise ValueError("batch_size and threads must be >= 1")
        if not self.learning_rate > 0 or not 0 < self.halving_factor <= 1:
            raise ValueError("learning_rate must be > 0 and halving_factor in (0, 1]")

    def to_dict(self):
        return dataclasses.asdict(self)


def contextual_moe_param_count(n_experts: int, context: int, dim: int) -> int:
    """Square ``dim x dim`` experts, one weight and bias per (expert, position)."""
    return n_experts * (2 * context + 1) * (dim * dim + dim)


def _fc_block(n_layers, in_dim, width, rng, linear_last=False):
    layers, prev = [], in_dim
    for i in range(n_layers):
        layers.append(Affine(prev, width, rng))
        if not (linear_last and i == n_layers - 1):
            layers.append(Relu(width))
        prev = width
    return layers


def build_stack(cfg: ModelConfig, rng) -> LayerStack:
    """Acoustic-model stack for ``cfg`` (without the auxiliary classifier)."""
    w, nc = cfg.hidden_width, cfg.n_classes
    if cfg.variant == "baseline":
        layers = _fc_block(cfg.hidden_layers, cfg.input_dim, w, rng) + [Affine(w, nc, rng)]
    elif cfg.variant == "eigen_dmoe":
        ew = cfg.eigen_width
        layers = _fc_block(cfg.hidden_layers, cfg.input_dim, w, rng) + [
            EigenMoELayer(cfg.eigen_experts, w, ew, rng),
            EigenMoELayer(cfg.eigen_experts, ew, ew, rng),
            Affine(ew, nc, rng),
        ]
    else:
        dx = cfg.feature_dim
        layers = [ContextualMoELayer(cfg.n_gate_classes, cfg.moe_context, dx, dx, rng)]
        layers += _fc_block(cfg.hidden_layers, dx, w, rng, linear_last=cfg.has_output_moe)
        if cfg.has_output_moe:
            out = cfg.expert_out_dim
            layers.append(GatedMoELayer(cfg.n_output_experts, w, out, cfg.expert_structure,
                                        cfg.band if cfg.expert_structure == "banded" else None, rng))
            layers.append(Affine(out, nc, rng))
        else:
            layers.append(Affine(w, nc, rng))
    return LayerStack(layers, nc, cfg.input_dim)


def build_aux(cfg: ModelConfig, rng) -> LayerStack:
    layers = _fc_block(cfg.aux_layers, cfg.feature_dim, cfg.aux_width, rng)
    layers.append(Affine(cfg.aux_width, cfg.n_gate_classes, rng))
    return LayerStack(layers, cfg.n_gate_classes, cfg.feature_dim)


def build_collapse_reference(cfg: ModelConfig, rng=None) -> LayerStack:
    """The "baseline plus two affine layers" stack a one-expert MixNet reduces to.

    The contextual MoE becomes a sum of ``2K+1`` affine maps and the gated MoE
    a single affine map.
    """
    if not cfg.is_mixnet:
        raise ValueError("collapse reference is defined for MixNet variants")
    dx, w = cfg.feature_dim, cfg.hidden_width
    layers = [ContextAffine(dx, dx, cfg.moe_context, rng)]
    layers += _fc_block(cfg.hidden_layers, dx, w, rng, linear_last=cfg.has_output_moe)
    if cfg.has_output_moe:
        out = cfg.expert_out_dim
        layers += [Affine(w, out, rng), Affine(out, cfg.n_classes, rng)]
    else:
        layers.append(Affine(w, cfg.n_classes, rng))
    return LayerStack(layers, cfg.n_classes, cfg.input_dim)


def copy_collapse_params(src: LayerStack, dst: LayerStack):
    """Copy a one-expert MixNet's parameters into its collapse reference."""
    for a, b in zip(src.layers, dst.layers):
        if isinstance(a, ContextualMoELayer):
            if a.n_experts != 1:
                raise ValueError("collapse needs a single contextual expert")
            b.set_params(W=a.params["A"][0], b=a.params["b"][0])
        elif isinstance(a, GatedMoELayer):
            if a.n_experts != 1:
                raise ValueError("collapse needs a single output expert")
            b.set_params(W=a.params["B"][0], b=a.params["b"][0])
        else:
            if type(a) is not type(b):
                raise ShapeError(f"layer mismatch: {a!r} vs {b!r}")
            if a.params:
                b.set_params(**a.params)


@dataclass
class Model:
    """Fitted front end, acoustic stack and (for MixNet) auxiliary classifier."""

    config: ModelConfig
    stack: LayerStack
    aux: LayerStack | None = None
    pipeline: FeaturePipeline | None = None
    epoch: int = 0
    seed: int = 0

    @property
    def param_count(self) -> int:
        return self.stack.param_count

    @property
    def aux_param_count(self) -> int:
        return 0 if self.aux is None else self.aux.param_count

    @property
    def aux_frozen(self) -> bool:
        return self.aux is not None and all(l.frozen for l in self.aux.layers)

    def set_aux_frozen(self, frozen: bool):
        if self.aux is not None:
            for layer in self.aux.layers:
                layer.frozen = frozen


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Randomly initialized model; the stack and aux draw from separate streams."""
    stack = build_stack(cfg, make_rng(seed))
    aux = build_aux(cfg, make_rng(seed + 1)) if cfg.is_mixnet else None
    return Model(cfg, stack, aux, None, 0, seed)


def fit_pipeline(model: Model, train: FrameDataset) -> Model:
    cfg = model.config
    if train.dim != cfg.frame_dim:
        raise ShapeError(f"dataset has {train.dim}-dim frames, model expects {cfg.frame_dim}")
    model.pipeline = FeaturePipeline(cfg.feature_context, cfg.use_lda).fit(
        train.frames, train.subclass, train.lengths)
    return model


def _features(model: Model, ds: FrameDataset) -> np.ndarray:
    if model.pipeline is None:
        raise RuntimeError("feature pipeline not fitted; call fit_pipeline first")
    if ds.dim != model.config.frame_dim:
        raise ShapeError(f"dataset has {ds.dim}-dim frames, model expects {model.config.frame_dim}")
    return model.pipeline.transform(ds.frames, ds.lengths)


def _batched(fn, X, size=4096):
    return np.concatenate([fn(X[i:i + size]) for i in range(0, X.shape[0], size)]) if X.shape[0] else fn(X)


def aux_posteriors(model: Model, x: np.ndarray) -> np.ndarray:
    return _batched(model.aux.predict_proba, x)


def model_inputs(model: Model, ds: FrameDataset):
    """``(stack_input, gate, aux_input)`` for every frame of ``ds``.

    For MixNet the stack input is the flattened ``x(t-K) .. x(t+K)`` window
    and the gate is the aux posterior for ``x(t)``.
    """
    x = _features(model, ds)
    if not model.config.is_mixnet:
        return x, None, None
    windows = splice(x, model.config.moe_context, ds.lengths)
    return windows, aux_posteriors(model, x), x


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    initial_cv_accuracy: float | None = None

    @property
    def train_loss(self):
        return [e["train_loss"] for e in self.epochs]

    @property
    def cv_accuracy(self):
        return [e["cv_accuracy"] for e in self.epochs]

    @property
    def final_cv_accuracy(self):
        return self.epochs[-1]["cv_accuracy"] if self.epochs else self.initial_cv_accuracy

    def to_dict(self):
        return {"epochs": self.epochs, "initial_cv_accuracy": self.initial_cv_accuracy}


def _accuracy(stack, X, y, gate=None):
    if gate is None:
        post = _batched(stack.predict_proba, X)
    else:
        post = np.concatenate([stack.predict_proba(X[i:i + 4096], gate[i:i + 4096])
                               for i in range(0, X.shape[0], 4096)])
    return float(np.mean(np.argmax(post, axis=1) == y))


def _chunk_grads(stack, xb, yb, gb, aux_in, aux, weight):
    """Loss and gradients of one chunk, scaled by its share of the batch."""
    aux_caches = None
    if aux is not None:
        h, aux_caches = aux_in, []
        for layer in aux.layers:
            h, c = layer.forward(h)
            aux_caches.append(c)
        gb = softmax(h)
    loss, _, caches = stack.forward(xb, yb, gb)
    grads, _, grad_gate = stack.backward(caches)
    grads = [{k: v * weight for k, v in g.items()} for g in grads]
    aux_grads = None
    if aux is not None:
        grad_logits = gb * (grad_gate - (gb * grad_gate).sum(axis=1, keepdims=True))
        aux_grads, _, _ = aux.backward_from(aux_caches, grad_logits)
        aux_grads = [{k: v * weight for k, v in g.items()} for g in aux_grads]
    return loss * weight, grads, aux_grads


def _sum_grads(parts):
    total = [dict(g) for g in parts[0]]
    for p in parts[1:]:
        for t, g in zip(total, p):
            for k, v in g.items():
                t[k] = t[k] + v
    return total


def _run_sgd(stack, X, y, Xcv, ycv, tc: TrainConfig, gate=None, gate_cv=None,
             aux=None, aux_x=None, gate_fn_cv=None, epochs=None, label="train"):
    epochs = tc.epochs if epochs is None else epochs
    report = TrainReport()
    if epochs == 0:
        if Xcv is not None:
            report.initial_cv_accuracy = _accuracy(stack, Xcv, ycv, gate_cv)
        return report
    rng = make_rng(tc.seed)
    n = X.shape[0]
    lr = tc.learning_rate
    cv_gate = gate_cv if gate_fn_cv is None else gate_fn_cv()
    prev_acc = _accuracy(stack, Xcv, ycv, cv_gate) if Xcv is not None else None
    report.initial_cv_accuracy = prev_acc
    pool = ThreadPoolExecutor(tc.threads) if tc.threads > 1 else None
    try:
        for epoch in range(1, epochs + 1):
            order = rng.permutation(n) if tc.shuffle else np.arange(n)
            total_loss = 0.0
            for b, start in enumerate(range(0, n, tc.batch_size)):
                idx = order[start:start + tc.batch_size]
                m = idx.size
                bounds = np.linspace(0, m, min(tc.threads, m) + 1).astype(int)
                jobs = []
                for lo, hi in zip(bounds[:-1], bounds[1:]):
                    sub = idx[lo:hi]
                    jobs.append((stack, X[sub], y[sub], None if gate is None else gate[sub],
                                 None if aux is None else aux_x[sub], aux, (hi - lo) / m))
                try:
                    if pool is None:
                        parts = [_chunk_grads(*j) for j in jobs]
                    else:
                        parts = list(pool.map(lambda j: _chunk_grads(*j), jobs))
                except FloatingPointError as exc:
                    raise TrainingDiverged(f"{label}: non-finite values at epoch {epoch}, batch {b}") from exc
                loss = sum(p[0] for p in parts)
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"{label}: non-finite loss at epoch {epoch}, batch {b}")
                stack.sgd_step(_sum_grads([p[1] for p in parts]), lr)
                if aux is not None:
                    aux.sgd_step(_sum_grads([p[2] for p in parts]), lr)
                total_loss += loss * m
            entry = {"epoch": epoch, "train_loss": total_loss / n, "learning_rate": lr}
            if Xcv is not None:
                cv_gate = gate_cv if gate_fn_cv is None else gate_fn_cv()
                acc = _accuracy(stack, Xcv, ycv, cv_gate)
                entry["cv_accuracy"] = acc
                if acc - prev_acc < tc.min_improvement:
                    lr *= tc.halving_factor
                prev_acc = acc
            report.epochs.append(entry)
    finally:
        if pool is not None:
            pool.shutdown()
    return report


def pretrain_aux(model: Model, train: FrameDataset, cv: FrameDataset | None, tc: TrainConfig):
    """Train the broad-class gate classifier on ``x(t)``; freezes it afterwards."""
    if model.aux is None:
        raise ValueError(f"{model.config.variant} has no auxiliary classifier")
    if train.broad is None:
        raise ValueError("broad-class labels are required")
    x = _features(model, train)
    xcv = _features(model, cv) if cv is not None else None
    model.set_aux_frozen(False)
    report = _run_sgd(model.aux, x, train.broad, xcv, None if cv is None else cv.broad,
                      dataclasses.replace(tc, seed=tc.seed + 1), epochs=tc.aux_epochs, label="aux")
    model.set_aux_frozen(True)
    return model, report


def train(model: Model, train_ds: FrameDataset, cv: FrameDataset | None, tc: TrainConfig):
    """Joint SGD training of the acoustic stack (and the aux, if unfrozen)."""
    X, gate, aux_x = model_inputs(model, train_ds)
    if cv is not None:
        Xcv, gate_cv, aux_x_cv = model_inputs(model, cv)
        ycv = cv.subclass
    else:
        Xcv = gate_cv = aux_x_cv = ycv = None
    joint_aux = model.aux if (model.aux is not None and tc.unfreeze_aux) else None
    gate_fn_cv = None
    if joint_aux is not None:
        model.set_aux_frozen(False)
        gate = None
        if cv is not None:
            gate_fn_cv = lambda: aux_posteriors(model, aux_x_cv)  # noqa: E731
    try:
        report = _run_sgd(model.stack, X, train_ds.subclass, Xcv, ycv, tc, gate, gate_cv,
                          joint_aux, aux_x, gate_fn_cv)
    finally:
        if joint_aux is not None:
            model.set_aux_frozen(True)
    model.epoch += tc.epochs
    return model, report


@dataclass
class EvalReport:
    accuracy: float
    broad_accuracy: float
    confusion: np.ndarray
    broad_confusion: np.ndarray
    n_frames: int
    param_count: int

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "broad_accuracy": self.broad_accuracy,
            "confusion": self.confusion.tolist(),
            "broad_confusion": self.broad_confusion.tolist(),
            "n_frames": self.n_frames,
            "param_count": self.param_count,
        }


def predict_proba(model: Model, ds: FrameDataset) -> np.ndarray:
    X, gate, _ = model_inputs(model, ds)
    if gate is None:
        return _batched(model.stack.predict_proba, X)
    return np.concatenate([model.stack.predict_proba(X[i:i + 4096], gate[i:i + 4096])
                           for i in range(0, X.shape[0], 4096)])


def evaluate(model: Model, ds: FrameDataset) -> EvalReport:
    """Frame accuracy (argmax, ties to the lowest index) and confusion matrices."""
    post = predict_proba(model, ds)
    pred = np.argmax(post, axis=1)
    nc = model.config.n_classes
    conf = np.zeros((nc, nc), dtype=np.int64)
    np.add.at(conf, (ds.subclass, pred), 1)
    s2b = ds.hierarchy.sub_to_broad
    nb = ds.hierarchy.n_broad
    bconf = np.zeros((nb, nb), dtype=np.int64)
    np.add.at(bconf, (ds.broad, s2b[pred]), 1)
    return EvalReport(
        float(np.mean(pred == ds.subclass)), float(np.mean(s2b[pred] == ds.broad)),
        conf, bconf, ds.n_frames, model.param_count,
    )


def nearest_mean_accuracy(train_x, train_sub, x, sub_to_broad, target):
    """Nearest sub-class mean classifier mapped to broad classes.

    Broad classes are multimodal, so each frame is assigned the broad class
    of its nearest sub-class mean.
    """
    classes = np.unique(train_sub)
    means = np.stack([train_x[train_sub == c].mean(axis=0) for c in classes])
    d = (x ** 2).sum(1)[:, None] - 2 * x @ means.T + (means ** 2).sum(1)[None, :]
    pred = sub_to_broad[classes[np.argmin(d, axis=1)]]
    return float(np.mean(pred == target))


# checkpoints ----------------------------------------------------------------

def _blocks(model: Model):
    out = []
    if model.pipeline is not None and model.pipeline.lda_ is not None:
        out.append(("pipeline.lda.matrix", model.pipeline.lda_.matrix))
        out.append(("pipeline.lda.eigenvalues", model.pipeline.lda_.eigenvalues))
    for name, layer, key in model.stack.named_params():
        out.append((f"stack.{name}", layer.params[key]))
    if model.aux is not None:
        for name, layer, key in model.aux.named_params():
            out.append((f"aux.{name}", layer.params[key]))
    return out


def checkpoint_bytes(model: Model, extra: dict | None = None) -> bytes:
    blocks = _blocks(model)
    manifest = {
        "tool_version": __version__,
        "model": model.config.to_dict(),
        "pipeline": None if model.pipeline is None else {
            "context": model.pipeline.context,
            "use_lda": model.pipeline.use_lda,
            "n_features_in": model.pipeline.n_features_in_,
        },
        "seed": model.seed,
        "epoch": model.epoch,
        "aux_frozen": model.aux_frozen,
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in blocks],
        "extra": extra or {},
    }
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + b"\n")
    buf.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode() + b"\n")
    for _, a in blocks:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model: Model, path, extra: dict | None = None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, extra))


def checkpoint_from_bytes(raw: bytes):
    magic, rest = raw.split(b"\n", 1)
    if magic != CKPT_MAGIC:
        raise ValueError(f"not a {CKPT_MAGIC.decode()} file")
    header, body = rest.split(b"\n", 1)
    m = json.loads(header)
    cfg = ModelConfig(**m["model"])
    model = Model(cfg, build_stack(cfg, None), build_aux(cfg, None) if cfg.is_mixnet else None,
                  None, m["epoch"], m["seed"])
    arrays, offset = {}, 0
    for blk in m["blocks"]:
        count = int(np.prod(blk["shape"], dtype=np.int64))
        arrays[blk["name"]] = np.frombuffer(body, "<f8", count, offset).reshape(blk["shape"]).astype(np.float64)
        offset += 8 * count
    if offset != len(body):
        raise ValueError(f"checkpoint payload has {len(body)} bytes, manifest declares {offset}")
    if m["pipeline"] is not None:
        p = m["pipeline"]
        pipe = FeaturePipeline(p["context"], p["use_lda"])
        pipe.n_features_in_ = p["n_features_in"]
        pipe.n_features_out_ = p["n_features_in"] * (2 * p["context"] + 1)
        pipe.lda_ = None
        if p["use_lda"]:
            pipe.lda_ = LdaTransform(arrays["pipeline.lda.matrix"], arrays["pipeline.lda.eigenvalues"],
                                     None, None, None)
        model.pipeline = pipe
    for prefix, stack in (("stack", model.stack), ("aux", model.aux)):
        if stack is None:
            continue
        for name, layer, key in stack.named_params():
            layer.set_params(**{key: arrays[f"{prefix}.{name}"]})
    model.set_aux_frozen(bool(m["aux_frozen"]))
    return model, m


def load_checkpoint(path):
    """Returns ``(model, manifest)``."""
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
