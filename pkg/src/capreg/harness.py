"""Training harness: dataset ingestion, the training loop, gradient and
depth experiments, and checkpoint persistence."""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, AdamState, NumericalError
from .decoder import (CaptionModel, REGRESSION, SOFTMAX, teacher_forced_loss,
                      greedy_decode, param_count)
from .embedding import EmbeddingTable
from .encoder import AnnotationSet, load_features


class DataError(Exception):
    pass


class TrainingAborted(Exception):
    """Numerical failure during training; carries a diagnostic dump."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


# full-scale hyperparameters, documented for reference; the desk-scale
# defaults below are what actually runs here
FULL_SCALE = dict(depth=8, hidden=512, embed_dim=1024, lr=0.001, decay_factor=0.1)


@dataclass
class TrainConfig:
    depth: int = 2
    hidden: int = 128
    embed_dim: int = 64
    annot_dim: int = 64
    annot_count: int = 16
    attention_k: int = 32
    head_kind: str = REGRESSION
    dropout_rate: float = 0.5
    lr: float = 0.001
    decay_factor: float = 0.1
    decay_patience: int = 50      # epochs without >1% improvement before decay
    epochs: int = 100
    batch_size: int = 1
    seed: int = 0
    precision: str = "f64"
    max_decode_len: int = 20
    hidden_nonlinearity: str = "tanh"

    def validate(self) -> None:
        if self.head_kind not in (REGRESSION, SOFTMAX):
            raise ValueError(f"unsupported head kind {self.head_kind!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        for name in ("depth", "hidden", "embed_dim", "annot_dim",
                     "attention_k", "epochs", "batch_size"):
            if getattr(self, name) < 1 and name != "epochs":
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be f32 or f64")

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        data.update({k: v for k, v in overrides.items() if v is not None})
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class DatasetRecord:
    image_id: str
    feature_path: str | None
    captions: list[list[str]]
    annotations: AnnotationSet | None = None

    def load_annotations(self) -> AnnotationSet:
        if self.annotations is None:
            self.annotations = load_features(self.feature_path)
        return self.annotations


def load_dataset(manifest_path) -> list[DatasetRecord]:
    """Read a JSON-lines manifest: one {"id", "features", "captions"} per line.

    Captions may be strings (whitespace split) or token lists. More than
    five captions per image is accepted with a warning; data is never
    discarded.
    """
    records = []
    root = Path(manifest_path).parent
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{manifest_path}:{lineno}: parse error: {e}") from e
            try:
                image_id = obj["id"]
                captions = obj["captions"]
            except KeyError as e:
                raise DataError(f"{manifest_path}:{lineno}: missing key {e}") from e
            captions = [c.split() if isinstance(c, str) else list(c)
                        for c in captions]
            if not captions:
                raise DataError(f"{manifest_path}:{lineno}: record {image_id} has no captions")
            if len(captions) > 5:
                print(f"warning: image {image_id} has {len(captions)} captions (> 5); keeping all")
            feature_path = obj.get("features")
            if feature_path is not None:
                feature_path = str(root / feature_path)
                if not Path(feature_path).exists():
                    raise DataError(f"{manifest_path}:{lineno}: missing feature file "
                                    f"{feature_path} for image {image_id}")
            records.append(DatasetRecord(str(image_id), feature_path, captions))
    return records


def split_validation(records: list[DatasetRecord]) -> tuple[list, list]:
    """Deterministic ~10% validation split by hash of the image id."""
    train, val = [], []
    for rec in records:
        (val if zlib.crc32(rec.image_id.encode()) % 10 == 0 else train).append(rec)
    return train, val


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.epochs, indent=2)

    def write_csv(self, path) -> None:
        if not self.epochs:
            return
        keys = list(self.epochs[0].keys())
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(keys) + "\n")
            for row in self.epochs:
                fh.write(",".join(str(row[k]) for k in keys) + "\n")


def _layer_grad_norms(model: CaptionModel) -> list[float]:
    return [float(np.linalg.norm(layer.w_x.grad)) for layer in model.layers]


def train(config: TrainConfig, records: list[DatasetRecord],
          embedding: EmbeddingTable,
          stop_loss_ratio: float | None = None) -> tuple[CaptionModel, TrainLog]:
    """Shuffled teacher-forced training with Adam and plateau LR decay.

    ``stop_loss_ratio`` optionally stops early once the epoch loss falls
    below that fraction of the initial epoch loss.
    """
    config.validate()
    ad.set_precision(config.precision)
    model = CaptionModel.init(
        embedding, depth=config.depth, hidden=config.hidden,
        annot_dim=config.annot_dim, attention_k=config.attention_k,
        head_kind=config.head_kind, dropout_rate=config.dropout_rate,
        seed=config.seed, hidden_nonlinearity=config.hidden_nonlinearity)
    train_set, val_set = split_validation(records)
    if not train_set:
        train_set, val_set = records, []
    samples = [(rec, cap) for rec in train_set for cap in rec.captions]
    rng = np.random.default_rng(config.seed)
    opt = AdamState(model.parameters(), lr=config.lr)
    log = TrainLog()
    initial_loss = None
    best_loss = math.inf
    stale = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        grad_norms = None
        try:
            for idx in order:
                rec, cap = samples[idx]
                loss = teacher_forced_loss(model, rec.load_annotations(), cap,
                                           train_mode=True, rng=rng)
                loss.backward()
                epoch_loss += loss.item()
                grad_norms = _layer_grad_norms(model)
                opt.step()
        except NumericalError as e:
            raise TrainingAborted(
                f"non-finite values at epoch {epoch}",
                dump={"epoch": epoch, "lr": opt.lr, "error": str(e),
                      "epoch_loss_so_far": epoch_loss}) from e
        epoch_loss /= len(samples)
        val_loss = None
        if val_set:
            val_loss = float(np.mean([
                teacher_forced_loss(model, rec.load_annotations(), cap).item()
                for rec in val_set for cap in rec.captions]))
        row = {"epoch": epoch, "loss": epoch_loss, "lr": opt.lr,
               "val_loss": val_loss}
        for i, g in enumerate(grad_norms or []):
            row[f"grad_norm_layer{i}"] = g
        log.epochs.append(row)
        if initial_loss is None:
            initial_loss = epoch_loss
        if epoch_loss < best_loss * 0.99:
            best_loss = epoch_loss
            stale = 0
        else:
            stale += 1
            if stale >= config.decay_patience:
                opt.lr *= config.decay_factor
                stale = 0
        if stop_loss_ratio is not None and epoch_loss < stop_loss_ratio * initial_loss:
            break
    return model, log


# ---------------------------------------------------------------------------
# experiments


def grad_experiment(vocab_size: int, embed_dim: int, depth: int,
                    trials: int = 50, seed: int = 0,
                    embedding: EmbeddingTable | None = None) -> dict:
    """Measure output-layer gradient magnitudes for both heads.

    Reports (a) the mean absolute non-target gradient component of the
    softmax cross-entropy head over random and uniform logits, (b) the mean
    absolute per-component gradient of the regression head at random and at
    unit residual, and (c) layer-wise gradient norms of small stacks trained
    one step with each head.
    """
    rng = np.random.default_rng(seed)

    uniform = Tensor(np.zeros(vocab_size), requires_grad=True)
    ad.cross_entropy(uniform, 0).backward()
    uniform_nontarget = float(np.abs(uniform.grad[1:]).mean())

    nontarget_means = []
    for _ in range(trials):
        logits = Tensor(rng.normal(0, 1, vocab_size), requires_grad=True)
        y = int(rng.integers(vocab_size))
        ad.cross_entropy(logits, y).backward()
        g = np.abs(logits.grad)
        nontarget_means.append((g.sum() - g[y]) / (vocab_size - 1))
    softmax_mean = float(np.mean(nontarget_means))

    unit_pred = Tensor(np.ones(embed_dim), requires_grad=True)
    ad.mse(unit_pred, Tensor(np.zeros(embed_dim))).backward()
    regression_unit = float(np.abs(unit_pred.grad).mean())

    reg_means = []
    for _ in range(trials):
        pred = Tensor(rng.normal(0, 1, embed_dim), requires_grad=True)
        ad.mse(pred, Tensor(rng.normal(0, 1, embed_dim))).backward()
        reg_means.append(float(np.abs(pred.grad).mean()))
    regression_mean = float(np.mean(reg_means))

    report = {
        "vocab_size": vocab_size,
        "embed_dim": embed_dim,
        "depth": depth,
        "softmax_nontarget_uniform": uniform_nontarget,
        "softmax_nontarget_mean": softmax_mean,
        "regression_unit_residual": regression_unit,
        "regression_mean": regression_mean,
    }

    if embedding is not None:
        for kind in (REGRESSION, SOFTMAX):
            model = CaptionModel.init(embedding, depth=depth, hidden=32,
                                      annot_dim=16, attention_k=8,
                                      head_kind=kind, dropout_rate=0.0, seed=seed)
            annots = AnnotationSet(rng.normal(0, 1, (4, 16)), 2, 2)
            cap = [embedding.vocab.decode(int(rng.integers(3, len(embedding.vocab))))
                   for _ in range(5)]
            loss = teacher_forced_loss(model, annots, cap)
            loss.backward()
            report[f"layer_grad_norms_{kind}"] = _layer_grad_norms(model)
    return report


def grad_experiment_csv(report: dict) -> str:
    scalar = {k: v for k, v in report.items() if not isinstance(v, list)}
    lines = [",".join(scalar.keys()), ",".join(str(v) for v in scalar.values())]
    for k, v in report.items():
        if isinstance(v, list):
            lines.append(k + "," + ",".join(f"{x:.6g}" for x in v))
    return "\n".join(lines) + "\n"


def depth_study(config_base: TrainConfig, depths: list[int],
                records: list[DatasetRecord], embedding: EmbeddingTable) -> list[dict]:
    """Train at each depth and report parameter counts plus toy-scale metrics."""
    from .metrics import EvalCorpus, bleu, rouge_l

    if not depths:
        raise ValueError("depth list is empty")
    rows = []
    for depth in depths:
        counts = {
            kind: param_count(depth, config_base.hidden, config_base.embed_dim,
                              len(embedding.vocab), config_base.annot_dim,
                              config_base.attention_k, kind)
            for kind in (REGRESSION, SOFTMAX)
        }
        cfg = TrainConfig(**{**asdict(config_base), "depth": depth})
        model, log = train(cfg, records, embedding)
        pairs = [(greedy_decode(model, rec.load_annotations(),
                                max_len=cfg.max_decode_len), rec.captions)
                 for rec in records]
        corpus = EvalCorpus(pairs)
        rows.append({
            "depth": depth,
            "params_regression": counts[REGRESSION],
            "params_softmax": counts[SOFTMAX],
            "final_loss": log.epochs[-1]["loss"] if log.epochs else None,
            "bleu4": bleu(corpus, 4),
            "bleu1": bleu(corpus, 1),
            "rouge_l": rouge_l(corpus),
        })
    return rows


# ---------------------------------------------------------------------------
# checkpointing

_CKPT_MAGIC = b"CKPT"
_CKPT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(model: CaptionModel, path) -> None:
    """Versioned binary container: JSON hyperparameter header plus named
    float64 tensor payloads, CRC-protected."""
    annot_dim = model.layers[0].w_x.shape[1] - model.embedding.dim
    header = {
        "depth": model.depth,
        "hidden": model.hidden,
        "embed_dim": model.embedding.dim,
        "annot_dim": annot_dim,
        "attention_k": model.attention.b_hidden.shape[0],
        "head_kind": model.head.kind,
        "dropout_rate": model.dropout_rate,
        "hidden_nonlinearity": model.attention.hidden_nonlinearity,
        "vocab_hash": model.embedding.vocab.content_hash(),
    }
    body = bytearray()
    header_blob = json.dumps(header, sort_keys=True).encode("utf-8")
    body += struct.pack("<I", len(header_blob)) + header_blob
    params = model.parameters()
    body += struct.pack("<I", len(params))
    for p in params:
        name = (p.name or "").encode("utf-8")
        body += struct.pack("<I", len(name)) + name
        body += struct.pack("<I", p.data.ndim)
        body += struct.pack(f"<{p.data.ndim}I", *p.data.shape)
        body += p.data.astype("<f8").tobytes()
    blob = _CKPT_MAGIC + struct.pack("<I", _CKPT_VERSION) + bytes(body)
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(struct.pack("<I", zlib.crc32(blob)))


def load_checkpoint(path, embedding: EmbeddingTable) -> CaptionModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if zlib.crc32(raw[:-4]) != struct.unpack("<I", raw[-4:])[0]:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, = struct.unpack("<I", raw[4:8])
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 8
    hlen, = struct.unpack_from("<I", raw, off); off += 4
    header = json.loads(raw[off:off + hlen].decode("utf-8")); off += hlen
    if header["vocab_hash"] != embedding.vocab.content_hash():
        raise CheckpointError("checkpoint vocabulary does not match the embedding table")
    if header["embed_dim"] != embedding.dim:
        raise CheckpointError("checkpoint embedding dimension mismatch")
    model = CaptionModel.init(
        embedding, depth=header["depth"], hidden=header["hidden"],
        annot_dim=header["annot_dim"], attention_k=header["attention_k"],
        head_kind=header["head_kind"], dropout_rate=header["dropout_rate"],
        hidden_nonlinearity=header["hidden_nonlinearity"])
    nparams, = struct.unpack_from("<I", raw, off); off += 4
    params = model.parameters()
    if nparams != len(params):
        raise CheckpointError("parameter count mismatch")
    for p in params:
        nlen, = struct.unpack_from("<I", raw, off); off += 4
        name = raw[off:off + nlen].decode("utf-8"); off += nlen
        if name != (p.name or ""):
            raise CheckpointError(f"parameter order mismatch: {name} vs {p.name}")
        ndim, = struct.unpack_from("<I", raw, off); off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off); off += 4 * ndim
        if tuple(shape) != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name}")
        count = int(np.prod(shape)) if shape else 1
        p.data = np.frombuffer(raw, dtype="<f8", count=count, offset=off
                               ).reshape(shape).astype(ad.default_dtype())
        off += count * 8
    return model
