"""Full and reduced detectors plus the model container format.

Container layout (all integers little-endian)::

    8 bytes   magic b"PODDETM1"
    8 bytes   uint64 length H of the JSON header
    H bytes   UTF-8 JSON header: kind, arch, seed, cut_index, tensors
              (name, shape, frozen) in storage order
    ...       float64 LE blobs, one per header tensor, in the same order

Saving a loaded file reproduces it byte for byte.
"""

import json
import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .detector import ConvHead, PriorConfig, Predictor, grid_priors
from .errors import ValidationError
from .nets import (DEFAULT_CUT, LayerNet, build_auxlayers, build_toy_basenet, count_parameters,
                   layer_from_spec, split_network)
from .pod import PODBasis, projection_weights
from .tensor import Tensor

MAGIC = b"PODDETM1"

# prior scales per full-detector source: cut tap, base-net output, aux 1, aux 2
FULL_SOURCE_SCALES = ([0.15, 0.3], [0.45], [0.6], [0.85])


class FullDetector:
    """Base net + auxiliary layers + conv heads on four feature maps."""

    kind = "full"

    def __init__(self, basenet, auxlayers, n_classes, tap_index=DEFAULT_CUT,
                 source_scales=FULL_SOURCE_SCALES, aspect_ratios=(1.0, 2.0, 0.5), seed=0):
        self.basenet, self.auxlayers = basenet, auxlayers
        self.n_classes, self.tap_index, self.seed = n_classes, tap_index, seed
        self.source_scales = [list(map(float, s)) for s in source_scales]
        self.aspect_ratios = [float(a) for a in aspect_ratios]
        self.split = split_network(basenet, tap_index)
        shapes = [basenet.shapes[tap_index], basenet.output_shape] + list(auxlayers.shapes[1:])
        if len(shapes) != len(self.source_scales):
            raise ValidationError(f"{len(shapes)} feature sources but {len(self.source_scales)} scale lists")
        rng = np.random.default_rng([seed, 3])
        self.heads = [ConvHead(c, len(sc) * len(self.aspect_ratios), n_classes, rng)
                      for (c, _, _), sc in zip(shapes, self.source_scales)]
        self.source_shapes = shapes
        self.priors = np.concatenate([grid_priors(h, w, sc, self.aspect_ratios)
                                      for (_, h, w), sc in zip(shapes, self.source_scales)])

    @classmethod
    def build(cls, n_classes, seed=0, tap_index=DEFAULT_CUT, **kw):
        basenet = build_toy_basenet(seed)
        return cls(basenet, build_auxlayers(basenet.output_shape, seed), n_classes, tap_index, seed=seed, **kw)

    def __call__(self, x):
        return self.forward(x)

    def features(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        feats = [self.split.pre(x)]
        feats.append(self.split.post(feats[0]))
        h = feats[-1]
        for layer in self.auxlayers.layers:
            h = layer(h)
            feats.append(h)
        return feats

    def forward(self, x):
        locs, clss = [], []
        for head, f in zip(self.heads, self.features(x)):
            loc, cls = head(f)
            locs.append(loc)
            clss.append(cls)
        return T.concat(locs, axis=1), T.concat(clss, axis=1)

    def parameters(self):
        ps = self.basenet.parameters() + self.auxlayers.parameters()
        for h in self.heads:
            ps += h.parameters()
        return ps

    def named_tensors(self):
        out = []
        for j, layer in enumerate(self.basenet.layers):
            out += [(f"basenet.{j}.{n}", t) for n, t in zip(("weight", "bias"), layer.parameters())]
        for j, layer in enumerate(self.auxlayers.layers):
            out += [(f"aux.{j}.{n}", t) for n, t in zip(("weight", "bias"), layer.parameters())]
        for j, head in enumerate(self.heads):
            out += [(f"head.{j}.{n}", t) for n, t in
                    zip(("loc.weight", "loc.bias", "cls.weight", "cls.bias"), head.parameters())]
        return out

    def arch(self):
        return {"basenet": self.basenet.spec(), "aux": self.auxlayers.spec(), "n_classes": self.n_classes,
                "tap_index": self.tap_index, "source_scales": self.source_scales,
                "aspect_ratios": self.aspect_ratios}

    @classmethod
    def from_arch(cls, arch, seed=0):
        basenet = _net_from_spec(arch["basenet"])
        aux = _net_from_spec(arch["aux"])
        return cls(basenet, aux, arch["n_classes"], arch["tap_index"], arch["source_scales"],
                   arch["aspect_ratios"], seed=seed)


class ReducedDetector:
    """Pre-model, frozen POD projection and a predictor fed by (x^(l), z)."""

    kind = "reduced"

    def __init__(self, pre_model, basis, n_classes, prior_config, cut_index, seed=0):
        self.pre_model = pre_model
        self.n_classes, self.cut_index, self.seed = n_classes, cut_index, seed
        self.prior_config = prior_config
        feat_shape = pre_model.output_shape
        if int(np.prod(feat_shape)) != basis.n_features:
            raise ValidationError(
                f"basis has {basis.n_features} features but x^(l) has shape {feat_shape}")
        self.singular_values = np.asarray(basis.singular_values, dtype=np.float64)
        W, b = projection_weights(basis)
        self.proj_weight = Tensor(W)   # frozen
        self.proj_bias = None if b is None else Tensor(b)
        self.proj_mean = None if basis.mean is None else Tensor(np.asarray(basis.mean))
        self.predictor = Predictor(feat_shape, basis.rank, n_classes, prior_config,
                                   np.random.default_rng([seed, 4]))
        self.priors = self.predictor.priors

    @property
    def rank(self):
        return self.proj_weight.shape[0]

    @property
    def basis(self):
        mean = None if self.proj_mean is None else self.proj_mean.data
        return PODBasis(self.proj_weight.data.T, self.singular_values, None, mean)

    def freeze_pre(self, frozen=True):
        self.pre_model.set_trainable(not frozen)

    def __call__(self, x):
        return self.forward(x)

    def project(self, x_l):
        return T.linear(T.flatten(x_l, 1), self.proj_weight, self.proj_bias)

    def forward(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        x_l = self.pre_model(x)
        return self.predictor(x_l, self.project(x_l))

    def parameters(self):
        ps = self.pre_model.parameters() + [self.proj_weight]
        if self.proj_bias is not None:
            ps.append(self.proj_bias)
        return ps + self.predictor.parameters()

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def named_tensors(self):
        out = []
        for j, layer in enumerate(self.pre_model.layers):
            out += [(f"pre.{j}.{n}", t) for n, t in zip(("weight", "bias"), layer.parameters())]
        out.append(("reduction.weight", self.proj_weight))
        if self.proj_bias is not None:
            out.append(("reduction.bias", self.proj_bias))
            out.append(("reduction.mean", self.proj_mean))
        out.append(("reduction.singular_values", Tensor(self.singular_values)))
        names = ("loc.weight", "loc.bias", "cls.weight", "cls.bias")
        if self.predictor.conv_head is not None:
            out += [(f"head.conv.{n}", t) for n, t in zip(names, self.predictor.conv_head.parameters())]
        if self.predictor.global_head is not None:
            out += [(f"head.global.{n}", t) for n, t in
                    zip(("weight", "bias"), self.predictor.global_head.parameters())]
        return out

    def arch(self):
        pc = self.prior_config
        return {"pre": self.pre_model.spec(), "rank": self.rank, "centered": self.proj_bias is not None,
                "n_singular": len(self.singular_values), "n_classes": self.n_classes,
                "cut_index": self.cut_index,
                "prior_config": {"scales_featmap": pc.scales_featmap, "scales_global": pc.scales_global,
                                 "aspect_ratios": pc.aspect_ratios}}

    @classmethod
    def from_arch(cls, arch, seed=0):
        pre = _net_from_spec(arch["pre"])
        n = int(np.prod(pre.output_shape))
        r = arch["rank"]
        placeholder = PODBasis(np.eye(n, r), np.zeros(arch["n_singular"]), None,
                               np.zeros(n) if arch["centered"] else None)
        return cls(pre, placeholder, arch["n_classes"], PriorConfig(**arch["prior_config"]),
                   arch["cut_index"], seed=seed)


def _net_from_spec(spec):
    return LayerNet([layer_from_spec(s) for s in spec["layers"]], spec["input_shape"])


def copy_net(net):
    """Independent copy of a LayerNet (fresh tensors, same values)."""
    clone = _net_from_spec(net.spec())
    for dst, src in zip(clone.parameters(), net.parameters()):
        dst.data = src.data.copy()
        dst.requires_grad = src.requires_grad
    return clone


def model_summary(model):
    return {"kind": model.kind,
            "params_trainable": count_parameters(model),
            "params_total": count_parameters(model, trainable_only=False)}


# -- container I/O ------------------------------------------------------------------

def _header(model):
    tensors = [{"name": n, "shape": list(t.shape), "frozen": not t.requires_grad}
               for n, t in model.named_tensors()]
    cut = model.cut_index if model.kind == "reduced" else model.tap_index
    return {"format": "poddet-model", "version": 1, "kind": model.kind, "seed": int(model.seed),
            "cut_index": int(cut), "arch": model.arch(), "tensors": tensors}


def model_bytes(model):
    header = json.dumps(_header(model), sort_keys=True, separators=(",", ":")).encode("utf-8")
    blobs = [t.data.astype("<f8").tobytes() for _, t in model.named_tensors()]
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def save_model(model, path):
    Path(path).write_bytes(model_bytes(model))


def _read(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read model file ({exc.strerror})") from None


def read_header(path):
    return _parse(_read(path), path)[0]


def _parse(raw, path):
    if raw[:8] != MAGIC or len(raw) < 16:
        raise ValidationError(f"{path}: not a model container (bad magic)")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: corrupt header ({exc})") from None
    return header, 16 + hlen


def load_model(path):
    raw = _read(path)
    header, offset = _parse(raw, path)
    kinds = {"full": FullDetector, "reduced": ReducedDetector}
    if header.get("kind") not in kinds:
        raise ValidationError(f"{path}: unknown model kind {header.get('kind')!r}")
    model = kinds[header["kind"]].from_arch(header["arch"], seed=header["seed"])
    named = model.named_tensors()
    if [n for n, _ in named] != [t["name"] for t in header["tensors"]]:
        raise ValidationError(f"{path}: tensor list does not match the declared architecture")
    for (name, t), meta in zip(named, header["tensors"]):
        n = int(np.prod(meta["shape"]))
        if offset + 8 * n > len(raw):
            raise ValidationError(f"{path}: truncated blob for {name}")
        t.data = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(meta["shape"]).astype(np.float64)
        t.requires_grad = not meta["frozen"]
        offset += 8 * n
    if offset != len(raw):
        raise ValidationError(f"{path}: {len(raw) - offset} trailing bytes")
    if header["kind"] == "reduced":
        model.singular_values = dict(named)["reduction.singular_values"].data
    return model
