"""Baseline training, reduced-detector construction, fine-tuning and evaluation."""

import copy
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .config import EvalConfig, TrainConfig
from .detector import match_priors, multibox_terms, postprocess
from .errors import NumericalError, ValidationError
from .metrics import mean_average_precision
from .models import FullDetector, ReducedDetector, copy_net
from .nets import count_parameters, split_network
from .pod import Energy, FixedRank, assemble_snapshots, compute_pod, select_rank, truncate
from .tensor import Tensor

log = logging.getLogger(__name__)


def encode_targets(priors, dataset, match_threshold=0.5):
    """Per-image prior labels [N, P] and offsets [N, P, 4]."""
    labels = np.zeros((len(dataset), len(priors)), dtype=np.int64)
    offsets = np.zeros((len(dataset), len(priors), 4))
    for i, truth in enumerate(dataset.truths()):
        labels[i], offsets[i], _ = match_priors(priors, truth, match_threshold)
    return labels, offsets


def _snapshot(params):
    return [p.data.copy() for p in params]


def _restore(params, saved):
    for p, d in zip(params, saved):
        p.data = d.copy()
        p.grad = None


def run_training(model, params, dataset, cfg, seed, log_every=0):
    """SGD over ``params`` for ``cfg.epochs`` epochs; returns the history dict.

    Epoch time covers forward + backward + optimiser step only. The epoch
    loss is the dataset-level loss (sum of unnormalised batch losses over
    the total positive count), so it does not depend on batch composition.
    """
    if cfg.epochs < 1:
        raise ValidationError(f"epochs must be >= 1, got {cfg.epochs}")
    if cfg.lr < 0:
        raise ValidationError(f"learning rate must be >= 0, got {cfg.lr}")
    images = dataset.images()
    labels, offsets = encode_targets(model.priors, dataset, cfg.match_threshold)
    rng = np.random.default_rng([seed, 5])
    velocity = {}
    history = {"loss": [], "loc": [], "cls": [], "epoch_times_s": [], "zero_positive_batches": 0}
    n = len(images)
    for epoch in range(cfg.epochs):
        checkpoint = _snapshot(params)
        order = rng.permutation(n)
        loc_sum = cls_sum = 0.0
        pos_total = 0
        elapsed = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            xb, lb, ob = Tensor(images[idx]), labels[idx], offsets[idx]
            t0 = time.perf_counter()
            loc, cls = model(xb)
            loc_term, cls_term, n_pos = multibox_terms(loc, cls, lb, ob, cfg.neg_pos_ratio)
            loss = loc_term + cls_term
            if not np.isfinite(loss.item()):
                T.clear_tape()
                _restore(params, checkpoint)
                raise NumericalError(f"loss diverged in epoch {epoch + 1}; restored last finite weights",
                                     checkpoint=model)
            T.backward(loss)
            if cfg.lr > 0:
                T.sgd_step(params, cfg.lr, cfg.momentum, velocity)
            else:
                for p in params:
                    p.grad = None
            elapsed += time.perf_counter() - t0
            scale = max(n_pos, 1)
            loc_sum += loc_term.item() * scale
            cls_sum += cls_term.item() * scale
            pos_total += n_pos
            history["zero_positive_batches"] += int(n_pos == 0)
        denom = max(pos_total, 1)
        history["loc"].append(loc_sum / denom)
        history["cls"].append(cls_sum / denom)
        history["loss"].append((loc_sum + cls_sum) / denom)
        history["epoch_times_s"].append(elapsed)
        if log_every and (epoch + 1) % log_every == 0:
            log.info("epoch %d/%d loss %.4f (loc %.4f cls %.4f) %.2fs", epoch + 1, cfg.epochs,
                     history["loss"][-1], history["loc"][-1], history["cls"][-1], elapsed)
    return history


def train_baseline(full, train, cfg=None, seed=0, log_every=0):
    """Train every parameter of the full detector."""
    cfg = cfg or TrainConfig()
    return run_training(full, full.parameters(), train, cfg, seed, log_every)


def rank_policy(reduce_cfg):
    return Energy(reduce_cfg.energy) if reduce_cfg.energy is not None else FixedRank(reduce_cfg.rank)


def build_reduced(full, train, cut_index, policy, prior_config, center=False, seed=0, warm_start=False):
    """Split the base net, fit POD on training snapshots and attach fresh heads.

    The auxiliary layers and post-model of ``full`` are dropped; the
    pre-model is copied so later fine-tuning leaves ``full`` untouched.
    Returns (reduced detector, full POD basis).
    """
    split = split_network(full.basenet, cut_index)
    snaps = assemble_snapshots(split.pre, train.images(), [it.id for it in train])
    basis = compute_pod(snaps, center=center)
    r = select_rank(basis, policy)
    red = ReducedDetector(copy_net(split.pre), truncate(basis, r), full.n_classes, prior_config,
                          cut_index, seed=seed)
    if warm_start:
        _warm_start(red, full)
    return red, basis


def _warm_start(red, full):
    head = red.predictor.conv_head
    src = full.heads[0]
    same = (red.cut_index == full.tap_index and head is not None
            and [p.shape for p in head.parameters()] == [p.shape for p in src.parameters()])
    if not same:
        raise ValidationError("warm start needs the cut index and feature-map priors of the full detector's tap head")
    for dst, p in zip(head.parameters(), src.parameters()):
        dst.data = p.data.copy()


def finetune(red, train, cfg=None, freeze_pre=True, seed=0, log_every=0):
    """Train the heads (and the pre-model unless frozen); the projection never changes."""
    cfg = cfg or TrainConfig()
    red.freeze_pre(freeze_pre)
    return run_training(red, red.trainable_parameters(), train, cfg, seed, log_every)


def detect(model, images, eval_cfg=None, batch_size=16):
    eval_cfg = eval_cfg or EvalConfig()
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            loc, cls = model(Tensor(images[start:start + batch_size]))
            for i in range(loc.shape[0]):
                out.append(postprocess(loc.data[i], cls.data[i], model.priors, eval_cfg.score_threshold,
                                       eval_cfg.nms_iou, eval_cfg.top_k, eval_cfg.max_out))
    return out


def evaluate_map(model, dataset, eval_cfg=None):
    eval_cfg = eval_cfg or EvalConfig()
    if len(dataset) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    dets = detect(model, dataset.images(), eval_cfg)
    result = mean_average_precision(dets, dataset.truths(), len(dataset.classes), eval_cfg.iou_threshold)
    result["classes"] = list(dataset.classes)
    return result, dets


@dataclass
class RunReport:
    params_full: int
    params_reduced: int
    compression_ratio: float
    params_full_total: int
    params_reduced_total: int
    epoch_times_full_s: list
    epoch_times_reduced_s: list
    speedup_ratio: float
    map_full: float
    map_reduced: float
    ap_full: list = field(default_factory=list)
    ap_reduced: list = field(default_factory=list)
    rank: int = 0
    cut_index: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"report: unknown field(s) {sorted(unknown)}")
        return cls(**d)


TIMING_FIELDS = ("epoch_times_full_s", "epoch_times_reduced_s", "speedup_ratio")


def make_report(full, red, hist_full, hist_red, eval_full, eval_red, config=None):
    pf, pr = count_parameters(full), count_parameters(red)
    tf, tr = hist_full["epoch_times_s"], hist_red["epoch_times_s"]
    return RunReport(
        params_full=pf, params_reduced=pr, compression_ratio=pr / pf,
        params_full_total=count_parameters(full, trainable_only=False),
        params_reduced_total=count_parameters(red, trainable_only=False),
        epoch_times_full_s=list(tf), epoch_times_reduced_s=list(tr),
        speedup_ratio=float(np.mean(tf) / np.mean(tr)),
        map_full=eval_full["map"], map_reduced=eval_red["map"],
        ap_full=eval_full["ap"], ap_reduced=eval_red["ap"],
        rank=getattr(red, "rank", 0), cut_index=getattr(red, "cut_index", 0), config=copy.deepcopy(config or {}))


@dataclass
class PipelineResult:
    full: FullDetector
    reduced: ReducedDetector
    basis: object
    hist_full: dict
    hist_reduced: dict
    eval_full: dict
    eval_reduced: dict
    report: RunReport


def run_pipeline(config, train=None, test=None, log_every=0):
    """Generate data (unless given), train the full detector, reduce, fine-tune and evaluate both."""
    from .data import generate_shapes_dataset

    if train is None or test is None:
        train, test = generate_shapes_dataset(config.data.n_train, config.data.n_test,
                                              tuple(config.data.classes), config.seed)
    n_classes = len(train.classes)
    full = FullDetector.build(n_classes, seed=config.seed)
    t0 = time.perf_counter()
    hist_full = train_baseline(full, train, config.full_train, config.seed, log_every)
    log.info("full detector trained in %.1fs", time.perf_counter() - t0)
    eval_full, _ = evaluate_map(full, test, config.eval)
    log.info("full detector mAP %.4f", eval_full["map"])
    rc = config.reduce
    red, basis = build_reduced(full, train, rc.cut_index, rank_policy(rc), config.priors, rc.center,
                               config.seed, rc.warm_start)
    log.info("reduced detector: cut %d, rank %d", red.cut_index, red.rank)
    hist_red = finetune(red, train, config.finetune, rc.freeze_pre, config.seed, log_every)
    eval_red, _ = evaluate_map(red, test, config.eval)
    log.info("reduced detector mAP %.4f", eval_red["map"])
    report = make_report(full, red, hist_full, hist_red, eval_full, eval_red, config.to_dict())
    return PipelineResult(full, red, basis, hist_full, hist_red, eval_full, eval_red, report)
