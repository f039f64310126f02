"""Two-step training protocol with selective parameter freezing.

Step 1 trains the per-point classifier alone on labeled blocks, measuring
validation accuracy after every epoch and keeping the best-validated
parameters. Between the steps, the validated classifier predicts labels
for every point of the unlabeled blocks (repeated sampling passes until
full coverage, majority vote per point); those artificial labels are
generated once and frozen. Step 2 attaches the refinement stack and
strictly alternates a labeled epoch, where everything trains, with an
artificial-label epoch, where only the classifier trains and the
refinement parameters are frozen. Validation runs through the full
classifier-plus-refinement pipeline after each epoch pair.

Checkpoints serialize every trainable array plus the config snapshot as
named little-endian float64 tensors behind a short text manifest, so a
round trip is bit-exact and corruption is detected before any state is
reconstructed.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields as dataclass_fields, asdict
from pathlib import Path

import numpy as np

from .autograd import Tape, backward
from .crf import (AXcrfParams, XcrfLevelParams, ThetaGridResult, axcrf_forward,
                  axcrf_graph, predict)
from .model import (MlpParams, UnaryModelParams, XConvParams, cross_entropy_graph,
                    init_unary_model, named_param_arrays, unary_forward, unary_graph)
from .neighbors import build_index
from .pointcloud import Block, FeatureScaler, PointCloud, block_seed, sample_block

__all__ = [
    "TrainConfig", "ModelCheckpoint", "ArtificialLabelSet", "EarlyStopper",
    "learning_rate", "train_step1", "train_step2", "generate_artificial_labels",
    "save_checkpoint", "load_checkpoint", "checkpoint_id", "pipeline_forward",
    "coverage_vote_predict", "evaluate_oa", "NumericError",
    "CheckpointError", "CorruptHeaderError", "TruncatedPayloadError",
    "VersionMismatchError", "MAGIC", "FORMAT_VERSION",
]


class NumericError(RuntimeError):
    """Optimization produced a non-finite loss."""

MAGIC = b"AXCRF"
FORMAT_VERSION = 1

# salts keep the sampling streams of unrelated phases independent
_SALT_TRAIN = 101
_SALT_ART = 102
_SALT_VAL = 202
_SALT_LABELS = 303
_SALT_ORDER = 404
_SALT_DROPOUT = 505


@dataclass
class TrainConfig:
    """Knobs for both steps; defaults follow the published schedule."""

    C: int
    lr: float = 0.005
    lr_decay: float = 0.8
    lr_decay_every: int = 5000
    lr_floor: float = 1e-6
    momentum: float = 0.0
    batch_blocks: int = 6
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0
    n_sample: int = 2048
    K: int = 16
    block_channels: tuple = (32, 32)
    block_strides: tuple = (1, 2)
    C_delta: int = 16
    hidden: int = 32
    dropout_rate: float = 0.3
    offset_scale: float = 1.0
    D_list: tuple = (1, 2, 3, 4, 8, 16)
    crf_K: int = 64
    r: int = 5
    shared_levels: bool = False
    alternate_per_batch: bool = False
    theta_alpha_candidates: tuple = (0.5, 1.0, 2.0, 4.0)
    theta_beta_candidates: tuple = (0.05, 0.1, 0.25, 0.5)
    theta_gamma_candidates: tuple = (0.5, 1.0, 2.0, 4.0)

    def __post_init__(self):
        for name in ("block_channels", "block_strides", "D_list",
                     "theta_alpha_candidates", "theta_beta_candidates",
                     "theta_gamma_candidates"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.lr <= 0 or self.lr_floor <= 0:
            raise ValueError("learning rate and floor must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"decay factor must be in (0, 1], got {self.lr_decay}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.batch_blocks < 1 or self.n_sample < 1 or self.max_epochs < 1:
            raise ValueError("batch size, sample size and epoch budget must be >= 1")
        if self.C < 2:
            raise ValueError(f"need at least two classes, got {self.C}")
        if len(self.block_channels) != len(self.block_strides):
            raise ValueError("block_channels and block_strides lengths differ")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")

    def as_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def learning_rate(config: TrainConfig, iteration: int) -> float:
    """Pure function of the gradient-step counter:
    max(floor, lr0 * decay^(iteration // decay_every))."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    return max(config.lr_floor,
               config.lr * config.lr_decay ** (iteration // config.lr_decay_every))


class EarlyStopper:
    """Counts consecutive epochs without strict improvement over the best
    value seen; fires exactly when the count reaches the patience."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best = -math.inf
        self.stale = 0

    def update(self, value: float, epochs: int = 1) -> bool:
        if value > self.best:
            self.best = value
            self.stale = 0
        else:
            self.stale += epochs
        return self.stale >= self.patience


@dataclass
class ModelCheckpoint:
    model: UnaryModelParams
    axcrf: AXcrfParams | None
    thetas: tuple | None            # (theta_alpha, theta_beta, theta_gamma)
    scaler: FeatureScaler | None
    config: TrainConfig
    best_val_oa: float
    iteration: int
    version: int = FORMAT_VERSION


@dataclass
class ArtificialLabelSet:
    """Frozen predictions of the validated step-1 model on unlabeled blocks."""

    cloud: PointCloud
    blocks: list
    point_indices: np.ndarray       # covered points, into cloud
    labels: np.ndarray              # one label per covered point
    checkpoint_id: str
    passes: int

    def __post_init__(self):
        self.point_indices = np.asarray(self.point_indices, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.point_indices.shape != self.labels.shape:
            raise ValueError(f"{self.point_indices.size} points but {self.labels.size} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.cloud.C):
            raise ValueError(f"labels outside [0, {self.cloud.C})")

    def dense_labels(self) -> np.ndarray:
        dense = np.full(self.cloud.n_points, -1, dtype=np.int64)
        dense[self.point_indices] = self.labels
        return dense

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.point_indices.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


def pipeline_forward(model: UnaryModelParams, axcrf: AXcrfParams | None,
                     positions: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Eval-mode forward of the deliverable classifier: unary potentials,
    refined by the stack when one is attached."""
    index = build_index(positions)
    U = unary_forward(positions, features, model, index=index)
    if axcrf is None:
        return U
    return axcrf_forward(U, positions, features, axcrf, index)


def coverage_vote_predict(cloud: PointCloud, blocks, forward_fn, n_sample: int,
                          global_seed: int, salt: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Eval passes over repeated block samplings until every block member is
    predicted at least once; one vote per (pass, point), majority wins,
    ties to the lowest class. Returns (point indices, labels, passes)."""
    votes = np.zeros((cloud.n_points, cloud.C), dtype=np.int64)
    member_mask = np.zeros(cloud.n_points, dtype=bool)
    passes = 0
    covered = np.zeros(cloud.n_points, dtype=bool)
    for block in blocks:
        member_mask[block.member_indices] = True
        block_pass = 0
        # coverage by independent without-replacement passes has a
        # coupon-collector tail around (members/n) * ln(members); the cap
        # only guards against a broken sampler
        ratio = block.n_members / max(1, min(n_sample, block.n_members))
        cap = max(16, int(8 * (ratio + 1) * (math.log(block.n_members) + 1)))
        while np.count_nonzero(~covered[block.member_indices]):
            if block_pass >= cap:
                raise RuntimeError(f"coverage loop exceeded {cap} passes on block "
                                   f"at origin {block.origin}")
            seed = block_seed(global_seed, block, salt=salt * 1_000_003 + block_pass)
            s = sample_block(block, n_sample, seed)
            U = forward_fn(cloud.positions[s.sample_indices],
                           cloud.features[s.sample_indices])
            pred = predict(U)
            uniq, first = np.unique(s.sample_indices, return_index=True)
            votes[uniq, pred[first]] += 1
            covered[uniq] = True
            block_pass += 1
            passes += 1
    point_indices = np.flatnonzero(member_mask)
    labels = votes[point_indices].argmax(axis=1)
    return point_indices, labels, passes


def evaluate_oa(cloud: PointCloud, blocks, forward_fn, n_sample: int,
                global_seed: int, salt: int = _SALT_VAL) -> float:
    """Overall accuracy of coverage-vote predictions against cloud labels."""
    if cloud.labels is None:
        raise ValueError("evaluation needs labeled points")
    pi, lab, _ = coverage_vote_predict(cloud, blocks, forward_fn, n_sample,
                                       global_seed, salt)
    if pi.size == 0:
        raise ValueError("no points covered by the given blocks")
    return float((lab == cloud.labels[pi]).mean())


def _block_grads(model, axcrf, cloud, block, labels_dense, config,
                 sample_seed, dropout_rng):
    """Forward + backward over one sampled block.
    Returns (grads by name, loss, point count)."""
    s = sample_block(block, config.n_sample, sample_seed)
    idx = s.sample_indices
    pos = cloud.positions[idx]
    feat = cloud.features[idx]
    lab = labels_dense[idx]
    if lab.min() < 0:
        raise ValueError("sampled a point with no label; artificial labels "
                         "must cover every block member")
    tape = Tape()
    index = build_index(pos)
    logits, binds = unary_graph(tape, pos, feat, model, training=True,
                                dropout_rng=dropout_rng, index=index)
    if axcrf is not None:
        out, xbinds = axcrf_graph(tape, logits, pos, feat, axcrf, index)
        binds = {**binds, **xbinds}
    else:
        out = logits
    loss = cross_entropy_graph(tape, out, lab)
    if not math.isfinite(float(loss.values)):
        raise NumericError(f"non-finite loss {float(loss.values)} on block "
                           f"at origin {block.origin}")
    g = backward(tape, loss)
    return {name: g[t.node_id] for name, t in binds.items()}, float(loss.values), idx.size


def _step_value(velocity, name, grad, momentum):
    # classical momentum: v <- momentum * v + grad; momentum=0 is plain SGD
    if momentum == 0.0:
        return grad
    v = velocity.get(name)
    v = grad if v is None else momentum * v + grad
    velocity[name] = v
    return v


def _apply_sgd(model, axcrf, grads, lr, update_xcrf, velocity, momentum):
    for name, arr in named_param_arrays(model).items():
        arr -= lr * _step_value(velocity, name, grads[name], momentum)
    if axcrf is None or not update_xcrf:
        return
    if axcrf.shared:
        gb = _step_value(velocity, "xcrf.shared.bilateral_weight",
                         grads["xcrf.shared.bilateral_weight"], momentum)
        gs = _step_value(velocity, "xcrf.shared.spatial_weight",
                         grads["xcrf.shared.spatial_weight"], momentum)
        gc = _step_value(velocity, "xcrf.shared.compat",
                         grads["xcrf.shared.compat"], momentum)
        new_b = axcrf.levels[0].bilateral_weight - lr * float(gb)
        new_s = axcrf.levels[0].spatial_weight - lr * float(gs)
        new_c = axcrf.levels[0].compat - lr * gc
        for lv in axcrf.levels:
            lv.bilateral_weight = new_b
            lv.spatial_weight = new_s
            lv.compat = new_c.copy()
        return
    for i, lv in enumerate(axcrf.levels):
        lv.bilateral_weight -= lr * float(_step_value(
            velocity, f"xcrf.level{i}.bilateral_weight",
            grads[f"xcrf.level{i}.bilateral_weight"], momentum))
        lv.spatial_weight -= lr * float(_step_value(
            velocity, f"xcrf.level{i}.spatial_weight",
            grads[f"xcrf.level{i}.spatial_weight"], momentum))
        lv.compat -= lr * _step_value(velocity, f"xcrf.level{i}.compat",
                                      grads[f"xcrf.level{i}.compat"], momentum)


def _run_epoch(model, axcrf, cloud, blocks, labels_dense, config, epoch, t,
               update_xcrf, salt, velocity=None):
    """One shuffled pass over the blocks in batches of config.batch_blocks;
    gradients averaged over all points of a batch. Returns (t, mean loss)."""
    order_rng = np.random.default_rng([config.seed, _SALT_ORDER, salt, epoch])
    order = order_rng.permutation(len(blocks))
    loss_sum = 0.0
    n_batches = 0
    for start in range(0, len(order), config.batch_blocks):
        chunk = order[start:start + config.batch_blocks]
        lr = learning_rate(config, t)
        per = []
        for bi in chunk:
            block = blocks[int(bi)]
            sseed = block_seed(config.seed, block, salt=salt * 1_000_003 + epoch)
            drng = np.random.default_rng([sseed, _SALT_DROPOUT])
            per.append(_block_grads(model, axcrf, cloud, block, labels_dense,
                                    config, sseed, drng))
        total_pts = sum(p[2] for p in per)
        agg: dict[str, np.ndarray] = {}
        batch_loss = 0.0
        for grads, loss, npts in per:
            w = npts / total_pts
            batch_loss += w * loss
            for name, g in grads.items():
                if name in agg:
                    agg[name] = agg[name] + w * g
                else:
                    agg[name] = w * g
        _apply_sgd(model, axcrf, agg, lr, update_xcrf,
                   velocity if velocity is not None else {}, config.momentum)
        loss_sum += batch_loss
        n_batches += 1
        t += 1
    return t, loss_sum / max(1, n_batches)


def _interleaved_epoch_pair(model, axcrf, cloud, train_blocks, labels_dense,
                            art, art_dense, config, epoch, t, velocity=None):
    """Per-batch alternation variant of one step-2 epoch pair: labeled and
    artificial batches interleave, freezing switching per batch."""
    schedules = []
    for salt, blocks in ((_SALT_TRAIN, train_blocks), (_SALT_ART, art.blocks)):
        rng = np.random.default_rng([config.seed, _SALT_ORDER, salt, epoch])
        order = rng.permutation(len(blocks))
        schedules.append([order[i:i + config.batch_blocks]
                          for i in range(0, len(order), config.batch_blocks)])
    lab_sched, art_sched = schedules
    losses = {exp: [] for exp in ("labeled", "artificial")}
    li = ai = 0
    turn_labeled = True
    while li < len(lab_sched) or ai < len(art_sched):
        if turn_labeled and li < len(lab_sched) or ai >= len(art_sched):
            chunk, data, kind = lab_sched[li], (cloud, train_blocks, labels_dense, True, _SALT_TRAIN), "labeled"
            li += 1
        else:
            chunk, data, kind = art_sched[ai], (art.cloud, art.blocks, art_dense, False, _SALT_ART), "artificial"
            ai += 1
        turn_labeled = not turn_labeled
        c, blocks, dense, upd, salt = data
        lr = learning_rate(config, t)
        per = []
        for bi in chunk:
            block = blocks[int(bi)]
            sseed = block_seed(config.seed, block, salt=salt * 1_000_003 + epoch)
            drng = np.random.default_rng([sseed, _SALT_DROPOUT])
            per.append(_block_grads(model, axcrf, c, block, dense, config, sseed, drng))
        total_pts = sum(p[2] for p in per)
        agg: dict[str, np.ndarray] = {}
        batch_loss = 0.0
        for grads, loss, npts in per:
            w = npts / total_pts
            batch_loss += w * loss
            for name, g in grads.items():
                agg[name] = agg[name] + w * g if name in agg else w * g
        _apply_sgd(model, axcrf, agg, lr, upd,
                   velocity if velocity is not None else {}, config.momentum)
        losses[kind].append(batch_loss)
        t += 1
    mean = {k: (float(np.mean(v)) if v else math.nan) for k, v in losses.items()}
    return t, mean["labeled"], mean["artificial"]


def _open_log(log_path):
    if log_path is None:
        return None
    return open(log_path, "a", encoding="utf-8")


def _log(fh, **record):
    if fh is not None:
        fh.write(json.dumps(record) + "\n")
        fh.flush()


def train_step1(cloud: PointCloud, train_blocks, val_blocks, config: TrainConfig,
                scaler: FeatureScaler | None = None,
                log_path=None) -> ModelCheckpoint:
    """Train and validate the classifier alone; return the best-validated
    parameters as a checkpoint."""
    train_blocks = list(train_blocks)
    val_blocks = list(val_blocks)
    if not train_blocks or not val_blocks:
        raise ValueError("step 1 needs non-empty train and validation block sets")
    if cloud.labels is None:
        raise ValueError("step 1 needs a labeled cloud")
    model = init_unary_model(seed=config.seed, C=config.C, C_in=cloud.n_features,
                             K=config.K, block_channels=config.block_channels,
                             block_strides=config.block_strides, C_delta=config.C_delta,
                             hidden=config.hidden, dropout_rate=config.dropout_rate,
                             offset_scale=config.offset_scale)
    stopper = EarlyStopper(config.patience)
    best_oa = -math.inf
    best_model = model.copy()
    best_iter = 0
    t = 0
    velocity: dict = {}
    fh = _open_log(log_path)
    try:
        for epoch in range(config.max_epochs):
            t, mean_loss = _run_epoch(model, None, cloud, train_blocks, cloud.labels,
                                      config, epoch, t, update_xcrf=False,
                                      salt=_SALT_TRAIN, velocity=velocity)
            val_oa = evaluate_oa(cloud, val_blocks,
                                 lambda p, f: unary_forward(p, f, model),
                                 config.n_sample, config.seed)
            _log(fh, step=1, epoch=epoch, kind="labeled", mean_loss=mean_loss,
                 val_oa=val_oa, lr=learning_rate(config, t))
            if val_oa > best_oa:
                best_oa = val_oa
                best_model = model.copy()
                best_iter = t
            if stopper.update(val_oa):
                break
    finally:
        if fh is not None:
            fh.close()
    return ModelCheckpoint(model=best_model, axcrf=None, thetas=None, scaler=scaler,
                           config=config, best_val_oa=best_oa, iteration=best_iter)


def generate_artificial_labels(checkpoint: ModelCheckpoint, cloud: PointCloud,
                               blocks) -> ArtificialLabelSet:
    """Predict every point of the unlabeled blocks with the validated
    classifier (no refinement stack); labels are frozen afterwards."""
    blocks = list(blocks)
    if not blocks:
        raise ValueError("unlabeled block set is empty")
    cfg = checkpoint.config
    model = checkpoint.model

    def fwd(pos, feat):
        return unary_forward(pos, feat, model)

    pi, lab, passes = coverage_vote_predict(cloud, blocks, fwd, cfg.n_sample,
                                            cfg.seed, _SALT_LABELS)
    if pi.size == 0:
        raise ValueError("unlabeled blocks contain no points")
    return ArtificialLabelSet(cloud=cloud, blocks=blocks, point_indices=pi,
                              labels=lab, checkpoint_id=checkpoint_id(checkpoint),
                              passes=passes)


def train_step2(checkpoint: ModelCheckpoint, cloud: PointCloud, train_blocks,
                artificial: ArtificialLabelSet, val_blocks,
                config: TrainConfig | None = None, thetas=None,
                log_path=None) -> ModelCheckpoint:
    """Retrain against labeled and artificial-label epochs in strict
    alternation; refinement parameters are frozen on artificial epochs.

    The gradient-step counter restarts at zero, giving the second step a
    fresh decay trajectory. ``thetas`` must come from the grid search (a
    ThetaGridResult or a (theta_alpha, theta_beta, theta_gamma) triple).
    """
    config = config if config is not None else checkpoint.config
    train_blocks = list(train_blocks)
    val_blocks = list(val_blocks)
    if not train_blocks or not val_blocks:
        raise ValueError("step 2 needs non-empty train and validation block sets")
    if cloud.labels is None:
        raise ValueError("step 2 needs a labeled cloud")
    if thetas is None:
        raise ValueError("theta bandwidths are uninitialized; run the grid "
                         "search and pass its result before step 2")
    if isinstance(thetas, ThetaGridResult):
        thetas = (thetas.theta_alpha, thetas.theta_beta, thetas.theta_gamma)
    ta, tb, tg = (float(x) for x in thetas)
    if min(ta, tb, tg) <= 0:
        raise ValueError(f"theta bandwidths must be positive, got {(ta, tb, tg)}")

    model = checkpoint.model.copy()
    axcrf = AXcrfParams.initial(config.C, D_list=config.D_list, K=config.crf_K,
                                r=config.r, theta_alpha=ta, theta_beta=tb,
                                theta_gamma=tg, shared=config.shared_levels)
    art_dense = artificial.dense_labels()
    art_hash = artificial.content_hash()
    stopper = EarlyStopper(config.patience)
    # the validated model with freshly attached refinement is the baseline;
    # retraining must beat it on validation or the baseline is returned
    init_oa = evaluate_oa(cloud, val_blocks,
                          lambda p, f: pipeline_forward(model, axcrf, p, f),
                          config.n_sample, config.seed)
    stopper.update(init_oa, epochs=0)
    best_oa = init_oa
    best_model = model.copy()
    best_axcrf = axcrf.copy()
    best_iter = 0
    t = 0
    velocity: dict = {}
    fh = _open_log(log_path)
    _log(fh, step=2, epoch=-1, kind="init", mean_loss=None, val_oa=init_oa,
         lr=learning_rate(config, 0))
    try:
        for pair in range(max(1, config.max_epochs // 2)):
            if config.alternate_per_batch:
                t, loss_lab, loss_art = _interleaved_epoch_pair(
                    model, axcrf, cloud, train_blocks, cloud.labels,
                    artificial, art_dense, config, pair, t, velocity=velocity)
            else:
                t, loss_lab = _run_epoch(model, axcrf, cloud, train_blocks,
                                         cloud.labels, config, pair, t,
                                         update_xcrf=True, salt=_SALT_TRAIN,
                                         velocity=velocity)
                t, loss_art = _run_epoch(model, axcrf, artificial.cloud,
                                         artificial.blocks, art_dense, config,
                                         pair, t, update_xcrf=False, salt=_SALT_ART,
                                         velocity=velocity)
            if artificial.content_hash() != art_hash:
                raise RuntimeError("artificial labels changed during step 2")
            val_oa = evaluate_oa(cloud, val_blocks,
                                 lambda p, f: pipeline_forward(model, axcrf, p, f),
                                 config.n_sample, config.seed)
            lr_now = learning_rate(config, t)
            _log(fh, step=2, epoch=2 * pair, kind="labeled", mean_loss=loss_lab,
                 val_oa=None, lr=lr_now)
            _log(fh, step=2, epoch=2 * pair + 1, kind="artificial",
                 mean_loss=loss_art, val_oa=val_oa, lr=lr_now)
            if val_oa > best_oa:
                best_oa = val_oa
                best_model = model.copy()
                best_axcrf = axcrf.copy()
                best_iter = t
            if stopper.update(val_oa, epochs=2):
                break
    finally:
        if fh is not None:
            fh.close()
    return ModelCheckpoint(model=best_model, axcrf=best_axcrf, thetas=(ta, tb, tg),
                           scaler=checkpoint.scaler, config=config,
                           best_val_oa=best_oa, iteration=best_iter)


# checkpoint serialization


class CheckpointError(ValueError):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


_CONFIG_INTS = ("lr_decay_every", "batch_blocks", "patience", "max_epochs",
                "seed", "n_sample", "C", "K", "C_delta", "hidden", "crf_K", "r")
_CONFIG_FLOATS = ("lr", "lr_decay", "lr_floor", "dropout_rate", "offset_scale",
                  "momentum")
_CONFIG_BOOLS = ("shared_levels", "alternate_per_batch")
_CONFIG_INT_TUPLES = ("block_channels", "block_strides", "D_list")
_CONFIG_FLOAT_TUPLES = ("theta_alpha_candidates", "theta_beta_candidates",
                        "theta_gamma_candidates")


def _checkpoint_tensors(ckpt: ModelCheckpoint) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    out["meta.best_val_oa"] = np.asarray(float(ckpt.best_val_oa))
    out["meta.iteration"] = np.asarray(float(ckpt.iteration))
    out["meta.c_in"] = np.asarray(float(ckpt.model.blocks[0].C_in))
    out["meta.has_axcrf"] = np.asarray(0.0 if ckpt.axcrf is None else 1.0)
    out["meta.has_scaler"] = np.asarray(0.0 if ckpt.scaler is None else 1.0)
    out["meta.has_thetas"] = np.asarray(0.0 if ckpt.thetas is None else 1.0)
    if ckpt.thetas is not None:
        out["meta.thetas"] = np.asarray([float(x) for x in ckpt.thetas])
    cfg = ckpt.config
    for name in _CONFIG_INTS + _CONFIG_FLOATS + _CONFIG_BOOLS:
        out[f"config.{name}"] = np.asarray(float(getattr(cfg, name)))
    for name in _CONFIG_INT_TUPLES + _CONFIG_FLOAT_TUPLES:
        out[f"config.{name}"] = np.asarray([float(x) for x in getattr(cfg, name)])
    out.update(named_param_arrays(ckpt.model))
    if ckpt.axcrf is not None:
        if ckpt.axcrf.shared:
            lv = ckpt.axcrf.levels[0]
            out["xcrf.shared.bilateral_weight"] = np.asarray(lv.bilateral_weight)
            out["xcrf.shared.spatial_weight"] = np.asarray(lv.spatial_weight)
            out["xcrf.shared.compat"] = lv.compat
        else:
            for i, lv in enumerate(ckpt.axcrf.levels):
                out[f"xcrf.level{i}.bilateral_weight"] = np.asarray(lv.bilateral_weight)
                out[f"xcrf.level{i}.spatial_weight"] = np.asarray(lv.spatial_weight)
                out[f"xcrf.level{i}.compat"] = lv.compat
    if ckpt.scaler is not None:
        out["scaler.scale"] = ckpt.scaler.scale
        out["scaler.offset"] = ckpt.scaler.offset
    return out


def _encode(tensors: dict[str, np.ndarray], version: int = FORMAT_VERSION) -> bytes:
    payload = bytearray()
    lines = []
    offset = 0
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8")
        if a.ndim:
            # ascontiguousarray promotes 0-d to (1,), which would lose the
            # scalar "-" shape marker in the manifest
            a = np.ascontiguousarray(a)
        raw = a.tobytes()
        shape_s = ",".join(str(d) for d in a.shape) if a.ndim else "-"
        lines.append(f"{name} {shape_s} {offset} {len(raw)}")
        payload += raw
        offset += len(raw)
    manifest = f"{len(lines)}\n" + "".join(line + "\n" for line in lines)
    return MAGIC + bytes([version]) + manifest.encode("ascii") + bytes(payload)


def _decode(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 6 or data[:5] != MAGIC:
        raise CorruptHeaderError("not a checkpoint: bad magic string")
    version = data[5]
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint is format version {version}; "
                                   f"this reader handles version {FORMAT_VERSION}")
    pos = 6

    def read_line():
        nonlocal pos
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise CorruptHeaderError("unterminated manifest")
        line = data[pos:nl]
        pos = nl + 1
        try:
            return line.decode("ascii")
        except UnicodeDecodeError:
            raise CorruptHeaderError("manifest is not ascii text") from None

    try:
        count = int(read_line())
    except ValueError:
        raise CorruptHeaderError("manifest count is not an integer") from None
    if count < 0:
        raise CorruptHeaderError(f"negative tensor count {count}")
    entries = []
    for _ in range(count):
        parts = read_line().split()
        if len(parts) != 4:
            raise CorruptHeaderError(f"malformed manifest line: {parts}")
        name, shape_s, off_s, len_s = parts
        try:
            shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split(","))
            off, length = int(off_s), int(len_s)
        except ValueError:
            raise CorruptHeaderError(f"malformed manifest line: {parts}") from None
        if off < 0 or length < 0 or length % 8:
            raise CorruptHeaderError(f"bad offset/length for tensor {name}")
        n_elem = 1
        for d in shape:
            if d < 0:
                raise CorruptHeaderError(f"negative dimension in tensor {name}")
            n_elem *= d
        if n_elem * 8 != length:
            raise CorruptHeaderError(f"tensor {name}: shape {shape} does not "
                                     f"match byte length {length}")
        entries.append((name, shape, off, length))
    payload = data[pos:]
    tensors: dict[str, np.ndarray] = {}
    for name, shape, off, length in entries:
        if off + length > len(payload):
            raise TruncatedPayloadError(
                f"tensor {name} needs payload bytes [{off}, {off + length}) "
                f"but only {len(payload)} are present")
        arr = np.frombuffer(payload, dtype="<f8", count=length // 8, offset=off)
        tensors[name] = arr.reshape(shape).copy()
    return tensors


def _require(tensors: dict, name: str) -> np.ndarray:
    if name not in tensors:
        raise CorruptHeaderError(f"checkpoint is missing tensor {name}")
    return tensors[name]


def _rebuild(tensors: dict[str, np.ndarray]) -> ModelCheckpoint:
    kw: dict = {}
    for name in _CONFIG_INTS:
        kw[name] = int(_require(tensors, f"config.{name}"))
    for name in _CONFIG_FLOATS:
        kw[name] = float(_require(tensors, f"config.{name}"))
    for name in _CONFIG_BOOLS:
        kw[name] = bool(int(_require(tensors, f"config.{name}")))
    for name in _CONFIG_INT_TUPLES:
        kw[name] = tuple(int(x) for x in _require(tensors, f"config.{name}"))
    for name in _CONFIG_FLOAT_TUPLES:
        kw[name] = tuple(float(x) for x in _require(tensors, f"config.{name}"))
    config = TrainConfig(**kw)

    c_in = int(_require(tensors, "meta.c_in"))
    blocks = []
    prev = c_in
    for bi, (c_out, d) in enumerate(zip(config.block_channels, config.block_strides)):
        pre = f"unary.block{bi}"
        lift = MlpParams(*(_require(tensors, f"{pre}.lift.{w}")
                           for w in ("w1", "b1", "w2", "b2")))
        xform = MlpParams(*(_require(tensors, f"{pre}.xform.{w}")
                            for w in ("w1", "b1", "w2", "b2")))
        blocks.append(XConvParams(lift=lift, xform=xform,
                                  conv_kernel=_require(tensors, f"{pre}.conv_kernel"),
                                  conv_bias=_require(tensors, f"{pre}.conv_bias"),
                                  K=config.K, C_in=prev, D=d,
                                  offset_scale=config.offset_scale))
        prev = c_out
    head = MlpParams(*(_require(tensors, f"unary.head.{w}")
                       for w in ("w1", "b1", "w2", "b2")))
    model = UnaryModelParams(blocks=blocks, head=head,
                             dropout_rate=config.dropout_rate, C=config.C)

    thetas = None
    if int(_require(tensors, "meta.has_thetas")):
        thetas = tuple(float(x) for x in _require(tensors, "meta.thetas"))

    axcrf = None
    if int(_require(tensors, "meta.has_axcrf")):
        if thetas is None:
            raise CorruptHeaderError("checkpoint has a refinement stack but no thetas")
        ta, tb, tg = thetas
        levels = []
        for i, d in enumerate(config.D_list):
            key = "xcrf.shared" if config.shared_levels else f"xcrf.level{i}"
            levels.append(XcrfLevelParams(
                bilateral_weight=float(_require(tensors, f"{key}.bilateral_weight")),
                spatial_weight=float(_require(tensors, f"{key}.spatial_weight")),
                compat=_require(tensors, f"{key}.compat").copy(),
                theta_alpha=ta, theta_beta=tb, theta_gamma=tg,
                K=config.crf_K, D=d, r=config.r))
        axcrf = AXcrfParams(levels=levels, shared=config.shared_levels)

    scaler = None
    if int(_require(tensors, "meta.has_scaler")):
        scaler = FeatureScaler(scale=_require(tensors, "scaler.scale"),
                               offset=_require(tensors, "scaler.offset"))

    return ModelCheckpoint(model=model, axcrf=axcrf, thetas=thetas, scaler=scaler,
                           config=config,
                           best_val_oa=float(_require(tensors, "meta.best_val_oa")),
                           iteration=int(_require(tensors, "meta.iteration")),
                           version=FORMAT_VERSION)


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    Path(path).write_bytes(_encode(_checkpoint_tensors(ckpt)))


def load_checkpoint(path) -> ModelCheckpoint:
    return _rebuild(_decode(Path(path).read_bytes()))


def checkpoint_id(ckpt: ModelCheckpoint) -> str:
    """Content hash of the serialized checkpoint, stable across processes."""
    return hashlib.sha256(_encode(_checkpoint_tensors(ckpt))).hexdigest()[:16]
