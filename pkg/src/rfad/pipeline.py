"""Run configuration, joint training, evaluation, and checkpointing."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, fields

import numpy as np

from .autodiff import GradTape, Tensor
from . import autodiff as ad
from .constraintor import (HypersphereConfig, LayerConstraintor, ai_occ_loss,
                           bi_occ_loss, dynamic_radii, pseudo_huber_rows,
                           weight_regularizer)
from .errors import ConfigError, ContractError, FormatError, IoError
from .featurestore import (FeatureDataset, LayerSpec, ReferencePool,
                           build_reference_pool, downsample_mask)
from .flow import LayerFlow, nf_total_loss
from .optim import Adam, StepSchedule
from .residual import to_residual
from .scoring import (MetricReport, ScoreMap, auroc, likelihood_score,
                      merge_maps, pro_at_fpr, upsample_bilinear)
from .vqfdm import Codebook, fdm_apply, vq_loss

log = logging.getLogger("rfad.pipeline")

CHECKPOINT_MAGIC = b"RSCK"
CHECKPOINT_VERSION = 1


@dataclass
class RunConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-5
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] = (70, 90)
    lam: float = 0.001
    t: float = 1.0
    a: float = 1.0
    k: int = 1536
    alpha_fdm: float = 0.4
    beta: float = 0.25
    gamma_focal: float = 2.0
    coupling_blocks: int = 10
    clamp: float = 1.9
    n_fs: int = 4
    seed: int = 42
    use_residual: bool = True
    use_constraintor: bool = True
    use_ai_occ: bool = True
    use_fdm: bool = True
    use_mac: bool = True

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.n_fs < 1:
            raise ConfigError("epochs/batch_size/n_fs out of range")
        if self.a <= 0:
            raise ConfigError("base-distribution offset a must be positive")
        if not (0.0 <= self.alpha_fdm <= 1.0):
            raise ConfigError("alpha_fdm must lie in [0, 1]")
        if self.beta <= 0 or self.t <= 0 or self.lam < 0:
            raise ConfigError("beta/t must be positive, lambda non-negative")
        if self.k < 1 or self.coupling_blocks < 1 or self.clamp <= 0:
            raise ConfigError("K/coupling_blocks/clamp out of range")


# config text format: one "key = value" per line, '#' comments, unknown
# keys rejected. "lambda" and "K" map to the lam / k attributes.
_KEY_TO_ATTR = {
    "epochs": "epochs", "batch_size": "batch_size", "lr": "lr",
    "weight_decay": "weight_decay", "milestones": "milestones",
    "lambda": "lam", "t": "t", "a": "a", "K": "k", "alpha_fdm": "alpha_fdm",
    "beta": "beta", "gamma_focal": "gamma_focal",
    "coupling_blocks": "coupling_blocks", "clamp": "clamp", "n_fs": "n_fs",
    "seed": "seed", "use_residual": "use_residual",
    "use_constraintor": "use_constraintor", "use_ai_occ": "use_ai_occ",
    "use_fdm": "use_fdm", "use_mac": "use_mac",
}
_ATTR_TO_KEY = {attr: key for key, attr in _KEY_TO_ATTR.items()}


def _parse_value(attr: str, raw: str):
    kind = {f.name: f.type for f in fields(RunConfig)}[attr]
    raw = raw.strip()
    if attr == "milestones":
        raw = raw.strip("[]()")
        return tuple(int(p) for p in raw.split(",") if p.strip()) if raw else ()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"bad boolean '{raw}' for {attr}")
    return raw


def _format_value(attr: str, value) -> str:
    if attr == "milestones":
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_from_text(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _KEY_TO_ATTR:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        attr = _KEY_TO_ATTR[key]
        try:
            setattr(cfg, attr, _parse_value(attr, raw))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    cfg.validate()
    return cfg


def config_to_text(cfg: RunConfig) -> str:
    lines = [f"{_ATTR_TO_KEY[f.name]} = {_format_value(f.name, getattr(cfg, f.name))}"
             for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_to_text(cfg).encode()).hexdigest()


class Model:
    """Per-layer constraintors, flows, and codebooks for one run."""

    def __init__(self, layer_specs: list[LayerSpec], config: RunConfig):
        config.validate()
        self.layer_specs = list(layer_specs)
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.constraintors = (
            [LayerConstraintor(s.c, rng) for s in layer_specs]
            if config.use_constraintor else None)
        self.flows = [LayerFlow(s.c, rng, blocks=config.coupling_blocks,
                                clamp=config.clamp) for s in layer_specs]
        self.codebooks: list[Codebook] | None = (
            [None] * len(layer_specs) if config.use_fdm else None)

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        if self.constraintors:
            for net in self.constraintors:
                params.extend(net.parameters())
        for flow in self.flows:
            params.extend(flow.parameters())
        if self.codebooks and all(cb is not None for cb in self.codebooks):
            for cb in self.codebooks:
                params.extend(cb.parameters())
        return params

    def constrain_rows(self, layer: int, rows: np.ndarray,
                       training: bool = False) -> np.ndarray:
        if self.constraintors is None:
            return rows
        out = self.constraintors[layer].forward(Tensor(rows), training)
        return out.data


# ------------------------------------------------------------------
# training


def _per_image_rows(dataset: FeatureDataset, pools: dict[int, ReferencePool],
                    config: RunConfig):
    """Residual (or initial) feature rows and position labels per image."""
    rows, labels = [], []
    for img in dataset.images:
        if config.use_residual:
            maps = to_residual(img.features, pools[img.class_id]).layers
        else:
            maps = img.features
        rows.append([fm.reshape(-1, fm.shape[-1]).astype(np.float32)
                     for fm in maps])
        labels.append([downsample_mask(img.mask, (s.h, s.w)).reshape(-1)
                       for s in dataset.layer_specs])
    return rows, labels


def select_reference_indices(dataset: FeatureDataset, n_fs: int,
                             rng: np.random.Generator,
                             class_id: int | None = None) -> list[int]:
    """Seeded draw of normal images (optionally of one class)."""
    candidates = [i for i, img in enumerate(dataset.images)
                  if img.label == 0 and (class_id is None
                                         or img.class_id == class_id)]
    if not candidates:
        raise ContractError("no normal images to draw references from")
    count = min(n_fs, len(candidates))
    picked = rng.choice(len(candidates), size=count, replace=False)
    return [candidates[i] for i in sorted(picked)]


def train(dataset: FeatureDataset, config: RunConfig):
    """Jointly optimize constraintors, flows, and codebooks.

    Returns (model, pools, manifest, history); history holds per-epoch
    mean losses. Reference pools are drawn once per class with the run
    seed and stay fixed.
    """
    config.validate()
    classes = sorted({img.class_id for img in dataset.images})
    for k in classes:
        if not any(img.label == 0 and img.class_id == k
                   for img in dataset.images):
            raise ContractError(f"class {k} has no normal image")

    ref_rng = np.random.default_rng([config.seed, 1])
    pools: dict[int, ReferencePool] = {}
    ref_indices: dict[int, list[int]] = {}
    for k in classes:
        idxs = select_reference_indices(dataset, config.n_fs, ref_rng, k)
        ref_indices[k] = idxs
        pools[k] = build_reference_pool(dataset, idxs)

    rows, labels = _per_image_rows(dataset, pools, config)
    model = Model(dataset.layer_specs, config)
    n_layers = dataset.n_layers
    n_images = len(dataset.images)

    def epoch_batches(epoch: int):
        order = np.random.default_rng([config.seed, 2, epoch]).permutation(
            n_images)
        for start in range(0, n_images, config.batch_size):
            yield order[start:start + config.batch_size]

    if config.use_fdm:
        cb_rng = np.random.default_rng([config.seed, 3])
        for l in range(n_layers):
            collected = []
            total = 0
            for batch in epoch_batches(0):
                for i in batch:
                    normal = rows[i][l][labels[i][l] == 0]
                    collected.append(normal)
                    total += len(normal)
                if total >= config.k:
                    break
            model.codebooks[l] = Codebook.from_samples(
                np.concatenate(collected, axis=0), config.k, cb_rng)

    optimizer = Adam(model.parameters(), lr=config.lr,
                     weight_decay=config.weight_decay)
    schedule = StepSchedule(config.lr, 0.1, config.milestones)
    history: list[dict[str, float]] = []

    for epoch in range(config.epochs):
        optimizer.lr = schedule.rate_at(epoch)
        sums = {"occ": 0.0, "nf": 0.0, "vq": 0.0, "total": 0.0}
        n_batches = 0
        for batch in epoch_batches(epoch):
            batch_rows = [np.concatenate([rows[i][l] for i in batch])
                          for l in range(n_layers)]
            batch_labels = [np.concatenate([labels[i][l] for i in batch])
                            for l in range(n_layers)]
            with GradTape() as tape:
                total = Tensor(np.float32(0.0))
                occ_val = nf_val = vq_val = 0.0
                for l in range(n_layers):
                    x_rows = batch_rows[l]
                    y = batch_labels[l]
                    abn = y == 1
                    x_in = Tensor(x_rows)
                    if model.constraintors is not None:
                        out = model.constraintors[l].forward(x_in, True)
                        r_max, r_min = dynamic_radii(x_rows[abn])
                        cfg_h = HypersphereConfig(r_max, r_min, config.t,
                                                  config.lam)
                        idx_n = np.nonzero(~abn)[0]
                        idx_a = np.nonzero(abn)[0]
                        if idx_n.size:
                            normal_out = ad.gather_permute(out, idx_n, axis=0)
                            dist = pseudo_huber_rows(normal_out)
                            if config.use_ai_occ and idx_a.size:
                                abn_out = ad.gather_permute(out, idx_a, axis=0)
                                occ = ai_occ_loss(dist, Tensor(x_rows[abn]),
                                                  abn_out, cfg_h)
                            else:
                                occ = bi_occ_loss(dist, cfg_h)
                            total = total + occ
                            occ_val += float(occ.data)
                    else:
                        out = x_in
                    # the flow fits the constrained distribution; its
                    # likelihood objective trains flow parameters only
                    z, log_det = model.flows[l].forward(Tensor(out.data))
                    nf = nf_total_loss(z, log_det, y, config.a,
                                       config.gamma_focal)
                    total = total + nf
                    nf_val += float(nf.data)
                    if config.use_fdm and (~abn).any():
                        vq = vq_loss(x_rows[~abn], model.codebooks[l],
                                     config.beta)
                        total = total + vq
                        vq_val += float(vq.data)
                if model.constraintors is not None:
                    weights = [w for net in model.constraintors
                               for w in net.weight_matrices()]
                    total = total + weight_regularizer(weights, config.lam)
                tape.backward(total)
            optimizer.step()
            optimizer.zero_grad()
            sums["occ"] += occ_val
            sums["nf"] += nf_val
            sums["vq"] += vq_val
            sums["total"] += float(total.data)
            n_batches += 1
        epoch_means = {k: v / max(n_batches, 1) for k, v in sums.items()}
        history.append(epoch_means)
        log.info("epoch %d: lr=%.3g occ=%.5f nf=%.5f vq=%.5f total=%.5f",
                 epoch, optimizer.lr, epoch_means["occ"], epoch_means["nf"],
                 epoch_means["vq"], epoch_means["total"])

    manifest = {
        "seed": config.seed,
        "config_sha256": config_hash(config),
        "reference_indices": {str(k): v for k, v in ref_indices.items()},
    }
    return model, pools, manifest, history


# ------------------------------------------------------------------
# evaluation


def score_image(model: Model, img_features: list[np.ndarray],
                pool: ReferencePool, h0: int, w0: int) -> ScoreMap:
    """Full scoring path for one image's multi-layer features."""
    config = model.config
    if config.use_residual:
        maps = to_residual(img_features, pool).layers
    else:
        maps = img_features
    like_maps, cls_maps = [], []
    for l, fm in enumerate(maps):
        h, w, c = fm.shape
        if config.use_fdm:
            fm = fdm_apply(fm, model.codebooks[l], config.alpha_fdm)
        rows = fm.reshape(-1, c).astype(np.float32)
        rows = model.constrain_rows(l, rows, training=False)
        z, log_det = model.flows[l].forward(Tensor(rows))
        zd = z.data.astype(np.float64)
        ld = log_det.data.astype(np.float64)
        like = likelihood_score(zd, ld, c).reshape(h, w)
        delta = 0.5 * np.sum(zd * zd, axis=1) - 0.5 * np.sum(
            (zd - config.a) ** 2, axis=1)
        cls = ad._sigmoid(delta).reshape(h, w)
        like_maps.append(upsample_bilinear(like, (h0, w0)))
        cls_maps.append(upsample_bilinear(cls, (h0, w0)))
    return merge_maps(like_maps, cls_maps, config.use_mac)


def evaluate(model: Model, dataset: FeatureDataset,
             reference_indices: list[int]):
    """Score every non-reference image and compute the metric report.

    Returns (report, maps, scored_indices); maps align with
    scored_indices.
    """
    refs = list(reference_indices)
    for i in refs:
        if dataset.images[i].label != 0:
            raise ContractError(f"reference image {i} is not normal")
    ref_set = set(refs)
    pool = build_reference_pool(dataset, refs)
    scored = [i for i in range(len(dataset.images)) if i not in ref_set]
    if not scored:
        raise ContractError("no images left to score")

    maps: list[ScoreMap] = []
    for i in scored:
        img = dataset.images[i]
        maps.append(score_image(model, img.features, pool,
                                dataset.h0, dataset.w0))

    image_scores = [m.image_score for m in maps]
    image_labels = [dataset.images[i].label for i in scored]
    grids = np.stack([m.grid for m in maps])
    masks = np.stack([dataset.images[i].mask for i in scored])
    report = MetricReport(
        image_auroc=auroc(image_scores, image_labels),
        pixel_auroc=auroc(grids.ravel(), masks.ravel()),
        pro_03=pro_at_fpr(grids, masks),
    )
    return report, maps, scored


# ------------------------------------------------------------------
# checkpoints


def _model_blocks(model: Model):
    """Flat list of (array, writeback) pairs in fixed serialization order."""
    entries = []

    def tensor_entry(t: Tensor):
        def write(arr, t=t):
            t.data = arr.reshape(t.data.shape).astype(t.data.dtype)
        entries.append((t.data, write))

    def ndarray_entry(owner, attr):
        arr = getattr(owner, attr)

        def write(new, owner=owner, attr=attr, shape=arr.shape, dtype=arr.dtype):
            setattr(owner, attr, new.reshape(shape).astype(dtype))
        entries.append((arr, write))

    for l in range(len(model.layer_specs)):
        if model.constraintors is not None:
            net = model.constraintors[l]
            for t in (net.w_a, net.b_a, net.bn_gamma, net.bn_beta):
                tensor_entry(t)
            ndarray_entry(net.bn_state, "running_mean")
            ndarray_entry(net.bn_state, "running_var")
            for t in (net.w_b, net.b_b):
                tensor_entry(t)
        flow = model.flows[l]
        for block in flow.blocks:
            for t in (block.w1, block.b1, block.w2, block.b2):
                tensor_entry(t)
            ndarray_entry(block, "perm")
            ndarray_entry(block, "scale_const")
        if model.codebooks is not None:
            tensor_entry(model.codebooks[l].embeddings)
    return entries


def save_checkpoint(path, model: Model) -> None:
    config_text = config_to_text(model.config).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<I", len(config_text)), config_text,
             struct.pack("<I", len(model.layer_specs))]
    for spec in model.layer_specs:
        parts.append(struct.pack("<III", spec.h, spec.w, spec.c))
    for arr, _ in _model_blocks(model):
        flat = np.ascontiguousarray(arr, dtype="<f4").ravel()
        parts.append(struct.pack("<I", flat.size))
        parts.append(flat.tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Model:
    try:
        with open(path, "rb") as fh:
            payload = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(payload):
            raise IoError(f"truncated checkpoint at offset {off}")
        chunk = payload[off:off + n]
        off += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version = struct.unpack("<I", take(4))[0]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    config = config_from_text(take(struct.unpack("<I", take(4))[0]).decode())
    n_layers = struct.unpack("<I", take(4))[0]
    specs = [LayerSpec(*struct.unpack("<III", take(12)))
             for _ in range(n_layers)]

    model = Model(specs, config)
    if config.use_fdm:
        # placeholder books so block layout matches; overwritten below
        model.codebooks = [
            Codebook(np.zeros((config.k, s.c), np.float32)) for s in specs]
    for arr, write in _model_blocks(model):
        count = struct.unpack("<I", take(4))[0]
        if count != arr.size:
            raise FormatError(f"block size {count} != expected {arr.size}")
        write(np.frombuffer(take(4 * count), dtype="<f4").copy())
    if off != len(payload):
        raise FormatError(f"{len(payload) - off} trailing checkpoint bytes")
    for flow in model.flows:
        for block in flow.blocks:
            block.perm = block.perm.astype(np.intp)
            block.inv_perm = np.argsort(block.perm).astype(np.intp)
    return model


def write_manifest(path, manifest: dict) -> None:
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
