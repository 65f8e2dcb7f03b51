"""Sparse-supervision losses, batch assembly, the training loop and checkpoints."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .contrastive import HeadSpec, MemoryBank, bank_update, contrastive_loss, extract_positive_embeddings, init_projection, project
from .datagen import SceneRecord, read_dataset, read_manifest, split_indices
from .errors import ConfigError, DomainError, FormatError
from .network import ModelConfig, forward_sites, init_params
from .tensor import ParamStore, Tensor

METRIC_FIELDS = ("step", "lr", "l_q", "l_rot", "l_w", "l_contrast", "l_total")
WIDTH_WEIGHT = 0.1


@dataclass(frozen=True)
class TrainConfig:
    scenes_per_iter: int = 4
    positives_per_scene: int = 8
    negatives_per_scene: int = 16
    pos_bce_weight: float = 2.0
    neg_bce_weight: float = 1.0
    contrast_weight: float = 0.5
    epochs: int = 10
    steps: int | None = None  # overrides epochs when set
    lr_init: float = 4e-5
    lr_max: float = 4e-4
    warmup: float = 0.3
    bank_capacity: int = 512
    bank_dim: int = 32
    proj_hidden: int = 32
    val_scenes: int | None = None  # None: default split rule
    checkpoint_every: int = 1
    seed: int = 0

    def __post_init__(self):
        problems = []
        for name in ("scenes_per_iter", "positives_per_scene", "negatives_per_scene", "epochs",
                     "bank_capacity", "bank_dim", "proj_hidden", "checkpoint_every"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("pos_bce_weight", "neg_bce_weight"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0")
        if self.contrast_weight < 0:
            problems.append("contrast_weight must be >= 0")
        if self.steps is not None and self.steps < 1:
            problems.append("steps must be >= 1")
        if not 0 < self.lr_init < self.lr_max:
            problems.append("need 0 < lr_init < lr_max")
        if not 0 <= self.warmup <= 1:
            problems.append("warmup must lie in [0, 1]")
        if self.val_scenes is not None and self.val_scenes < 0:
            problems.append("val_scenes must be >= 0")
        if problems:
            raise ConfigError("invalid training config", problems)


def total_loss(l_grasp, l_contrast, weight: float = 0.5):
    """``l_grasp + weight * l_contrast`` for floats or tensors."""
    if isinstance(l_grasp, Tensor) or isinstance(l_contrast, Tensor):
        if weight == 0 or l_contrast is None:
            return l_grasp
        return T.add(l_grasp, T.scale(l_contrast, weight))
    return l_grasp + weight * l_contrast


@dataclass
class SceneBatch:
    """Supervision for one scene: label sites plus targets, in label order (positives first)."""

    sites: np.ndarray  # (P, 3) voxel indices
    positions: np.ndarray  # (P, 3) label positions
    quality: np.ndarray  # (P,) 0/1
    rotation: np.ndarray  # (4, P)
    width: np.ndarray  # (P,)
    flagged: bool = False

    @property
    def positive(self) -> np.ndarray:
        return self.quality == 1


def labels_to_batch(record: SceneRecord, labels, flagged: bool = False) -> SceneBatch:
    if not labels:
        raise DomainError("need at least one label")
    pos = np.array([lab.position for lab in labels], dtype=np.float64)
    return SceneBatch(
        sites=record.tsdf.voxel_index(pos),
        positions=pos,
        quality=np.array([lab.quality for lab in labels], dtype=np.int64),
        rotation=np.array([lab.rotation.as_array() for lab in labels]).T,
        width=np.array([lab.width for lab in labels], dtype=np.float64),
        flagged=flagged,
    )


def sample_scene_labels(record: SceneRecord, cfg: TrainConfig, rng: np.random.Generator) -> SceneBatch:
    """Draw the per-scene quota; short supplies are drawn with replacement and flagged."""
    pos, neg = record.positives, record.negatives
    flagged = False
    chosen = []
    for pool, k in ((pos, cfg.positives_per_scene), (neg, cfg.negatives_per_scene)):
        if not pool:
            flagged = True
            continue
        replace = len(pool) < k
        flagged |= replace
        idx = rng.choice(len(pool), size=k, replace=replace)
        chosen.extend(pool[i] for i in idx)
    return labels_to_batch(record, chosen, flagged)


def grasp_loss(heads, batch: SceneBatch, cfg: TrainConfig, max_width: float) -> tuple:
    """Scene loss ``L_q + mean_pos(L_rot + 0.1 L_w)`` and a float breakdown.

    ``heads`` holds predictions at ``batch.sites`` in label order.
    """
    dtype = heads.quality_logit.dtype
    weights = np.where(batch.positive, cfg.pos_bce_weight, cfg.neg_bce_weight)
    l_q = T.mean(T.bce_with_logits(heads.quality_logit, batch.quality, weights))
    parts = {"l_q": l_q.item(), "l_rot": 0.0, "l_w": 0.0}
    idx = np.flatnonzero(batch.positive)
    if idx.size == 0:
        return l_q, parts
    l_rot = T.mean(T.rotation_loss(T.take(heads.rotation, idx), batch.rotation[:, idx]))
    what = T.take(heads.width, idx)
    err = T.scale(T.sub(what, batch.width[idx].astype(dtype)), 1.0 / max_width)
    l_w = T.mean(T.square(err))
    parts["l_rot"] = l_rot.item()
    parts["l_w"] = l_w.item()
    return T.add(l_q, T.add(l_rot, T.scale(l_w, WIDTH_WEIGHT))), parts


class Trainer:
    """Model parameters, optimizer state, memory bank and schedule position."""

    def __init__(self, model_cfg: ModelConfig, cfg: TrainConfig, total_steps: int):
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.total_steps = total_steps
        self.store = init_params(model_cfg)
        self.use_bank = cfg.contrast_weight > 0
        if self.use_bank:
            init_projection(self.store, HeadSpec(sum(model_cfg.channels), cfg.proj_hidden, cfg.bank_dim),
                            model_cfg.seed)
        self.bank = MemoryBank(cfg.bank_capacity, cfg.bank_dim)

    @property
    def step_index(self) -> int:
        return self.store.step

    def lr(self, step: int) -> float:
        return T.one_cycle_lr(min(step, self.total_steps), self.total_steps, self.cfg.lr_init,
                              self.cfg.lr_max, self.cfg.warmup)

    def assemble(self, records, step: int) -> list:
        rng = np.random.default_rng([self.cfg.seed, 2, step])
        return [sample_scene_labels(r, self.cfg, rng) for r in records]

    def train_step(self, records) -> dict:
        """One optimizer step on ``records``; returns the loss breakdown and learning rate."""
        step = self.store.step
        batches = self.assemble(records, step)
        mc = self.model_cfg
        grasp_terms, embeds = [], []
        sums = {"l_q": 0.0, "l_rot": 0.0, "l_w": 0.0}
        for rec, b in zip(records, batches):
            heads, pyr = forward_sites(self.store, rec.tsdf, mc, b.sites)
            lg, parts = grasp_loss(heads, b, self.cfg, mc.max_width)
            grasp_terms.append(lg)
            for k in sums:
                sums[k] += parts[k] / len(records)
            if self.use_bank and b.positive.any():
                embeds.append(extract_positive_embeddings(pyr.levels, b.positions[b.positive],
                                                          rec.tsdf.voxel_size))
        l_grasp = grasp_terms[0]
        for t in grasp_terms[1:]:
            l_grasp = T.add(l_grasp, t)
        l_grasp = T.scale(l_grasp, 1.0 / len(records))
        loss, l_c, z, ready = l_grasp, 0.0, None, False
        if self.use_bank and embeds:
            z, _ = project(self.store, T.concat(embeds, axis=0))
            lc, ready = contrastive_loss(z, self.bank)
            if ready:
                l_c = lc.item()
                loss = total_loss(l_grasp, lc, self.cfg.contrast_weight)
        loss.backward()
        self.store.collect()
        lr = self.lr(step)
        T.adam_step(self.store, lr)
        if z is not None:
            bank_update(self.bank, z)
        return {"step": step, "lr": lr, **sums, "l_contrast": l_c, "l_total": loss.item(),
                "l_grasp": l_grasp.item(), "contrast_ready": ready,
                "flagged": any(b.flagged for b in batches)}

    # -- evaluation and state ---------------------------------------------------

    def site_predictions(self, record: SceneRecord, labels=None) -> tuple:
        labels = record.labels if labels is None else labels
        b = labels_to_batch(record, labels)
        heads, _ = forward_sites(self.store, record.tsdf, self.model_cfg, b.sites)
        self.store._leaves = {}
        return heads, b

    def validate(self, records) -> dict:
        """Weighted BCE, quality accuracy at 0.5 and mean rotation loss over every stored label."""
        bce, correct, n, rot, npos = 0.0, 0, 0, 0.0, 0
        for rec in records:
            heads, b = self.site_predictions(rec)
            w = np.where(b.positive, self.cfg.pos_bce_weight, self.cfg.neg_bce_weight)
            bce += float(T.bce_with_logits(heads.quality_logit, b.quality, w).data.sum())
            pred = heads.quality_logit.data > 0.0
            correct += int(np.sum(pred == b.positive))
            n += len(b.quality)
            if b.positive.any():
                r = T.rotation_loss(Tensor(heads.rotation.data[:, b.positive]), b.rotation[:, b.positive])
                rot += float(r.data.sum())
                npos += int(b.positive.sum())
        return {"bce": bce / max(n, 1), "accuracy": correct / max(n, 1), "rot": rot / max(npos, 1)}

    def state_records(self) -> list:
        recs = [(name, arr) for name, arr in self.store.params.items()]
        recs += [("adam.m/" + name, arr) for name, arr in self.store.m.items()]
        recs += [("adam.v/" + name, arr) for name, arr in self.store.v.items()]
        recs.append(("state.step", np.array([self.store.step], dtype=np.float64)))
        if self.use_bank:
            recs.append(("bank.entries", self.bank.entries))
            recs.append(("bank.cursor", np.array([self.bank.fill, self.bank._next], dtype=np.float64)))
        return recs

    def load_state(self, records, path=None) -> None:
        found = dict(records)
        for name in self.store.params:
            slots = ((name, self.store.params, True), ("adam.m/" + name, self.store.m, False),
                     ("adam.v/" + name, self.store.v, False))
            for key, target, required in slots:
                if key not in found:
                    if required:
                        raise FormatError(f"checkpoint lacks parameter {key}", path)
                    continue  # weights-only checkpoint
                arr = found[key]
                if arr.shape != target[name].shape:
                    raise FormatError(f"shape mismatch for {key}: {arr.shape}", path)
                target[name][...] = arr
        if "state.step" in found:
            self.store.step = int(found["state.step"][0])
        if self.use_bank and "bank.entries" in found:
            if found["bank.entries"].shape != self.bank.entries.shape:
                raise FormatError("memory bank shape does not match the training config", path)
            self.bank.entries[...] = found["bank.entries"]
            self.bank.fill, self.bank._next = (int(c) for c in found["bank.cursor"])


def load_model(checkpoint, model_cfg: ModelConfig | None = None) -> tuple:
    """Parameters from a checkpoint; the model config defaults to ``model.json`` beside it."""
    path = Path(checkpoint)
    if not path.exists():
        raise FormatError("missing checkpoint", path)
    if model_cfg is None:
        cfg_path = path.parent / "model.json"
        if not cfg_path.exists():
            raise FormatError("missing model.json next to checkpoint", cfg_path)
        model_cfg = ModelConfig.from_json(cfg_path.read_text())
    store = init_params(model_cfg)
    found = dict(T.read_checkpoint(path))
    for name, arr in store.params.items():
        if name not in found:
            raise FormatError(f"checkpoint lacks parameter {name}", path)
        if found[name].shape != arr.shape:
            raise FormatError(f"shape mismatch for {name}", path)
        arr[...] = found[name]
    return store, model_cfg


# -- the loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list
    validation: list
    best_epoch: int | None
    out_dir: Path


def plan_steps(n_train: int, cfg: TrainConfig) -> tuple:
    """``(steps_per_epoch, total_steps)``."""
    per_epoch = math.ceil(n_train / cfg.scenes_per_iter)
    total = cfg.steps if cfg.steps is not None else cfg.epochs * per_epoch
    return per_epoch, total


def epoch_order(n_train: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 3, epoch]).permutation(n_train)


def train(data_dir, cfg: TrainConfig, model_cfg: ModelConfig, out_dir, resume=None, log=None) -> TrainResult:
    """Epoch loop over shuffled scenes with per-epoch checkpoints and validation.

    Writes ``metrics.csv``, ``validation.csv``, ``model.json``, ``train.json``,
    ``epoch_%04d.vgck`` (every ``checkpoint_every`` epochs), ``last.vgck`` and
    ``best.vgck`` (lowest validation BCE) into ``out_dir``.
    """
    entries = read_manifest(data_dir)
    n = len(entries)
    if cfg.val_scenes is None:
        train_idx, val_idx = split_indices(n)
    else:
        k = min(cfg.val_scenes, max(n - 1, 0))
        train_idx, val_idx = list(range(n - k)), list(range(n - k, n))
    if not train_idx:
        raise ConfigError("no training scenes", [f"dataset {data_dir} has {n} scenes"])
    train_recs = read_dataset(data_dir, train_idx)
    val_recs = read_dataset(data_dir, val_idx) if val_idx else []
    for rec in train_recs + val_recs:
        if rec.tsdf.resolution != model_cfg.resolution:
            raise ConfigError("resolution mismatch",
                              [f"dataset grid {rec.tsdf.resolution} != model resolution {model_cfg.resolution}"])
    per_epoch, total = plan_steps(len(train_recs), cfg)
    trainer = Trainer(model_cfg, cfg, total)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.json").write_text(model_cfg.to_json() + "\n")
    (out / "train.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    if resume is not None:
        trainer.load_state(T.read_checkpoint(resume), resume)
    start = trainer.step_index
    mode = "a" if resume is not None and (out / "metrics.csv").exists() else "w"
    history, validation = [], []
    best = (math.inf, None)
    with open(out / "metrics.csv", mode, newline="") as fh, \
            open(out / "validation.csv", mode, newline="") as vh:
        writer = csv.writer(fh)
        vwriter = csv.writer(vh)
        if mode == "w":
            writer.writerow(METRIC_FIELDS)
            vwriter.writerow(("epoch", "step", "bce", "accuracy", "rot"))
        step = start
        while step < total:
            epoch, pos = divmod(step, per_epoch)
            order = epoch_order(len(train_recs), cfg.seed, epoch)
            chunk = order[pos * cfg.scenes_per_iter:(pos + 1) * cfg.scenes_per_iter]
            m = trainer.train_step([train_recs[i] for i in chunk])
            history.append(m)
            writer.writerow([m["step"]] + [repr(float(m[k])) for k in METRIC_FIELDS[1:]])
            fh.flush()
            if log is not None:
                log(m)
            step += 1
            if step % per_epoch == 0 or step == total:
                ep = (step - 1) // per_epoch
                v = trainer.validate(val_recs) if val_recs else None
                if v is not None:
                    validation.append({"epoch": ep, **v})
                    vwriter.writerow((ep, step, repr(v["bce"]), repr(v["accuracy"]), repr(v["rot"])))
                    vh.flush()
                recs = trainer.state_records()
                if (ep + 1) % cfg.checkpoint_every == 0 or step == total:
                    T.write_checkpoint(recs, out / f"epoch_{ep:04d}.vgck")
                T.write_checkpoint(recs, out / "last.vgck")
                if v is not None and v["bce"] < best[0]:
                    best = (v["bce"], ep)
                    T.write_checkpoint(recs, out / "best.vgck")
    if best[1] is None and (out / "last.vgck").exists() and not val_recs:
        T.write_checkpoint(trainer.state_records(), out / "best.vgck")
    return TrainResult(history, validation, best[1], out)
