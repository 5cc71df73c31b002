"""Mini-batch training loop, config parsing, and checkpointing.

Training is fully determined by (graph, config): epoch shuffles and all
sampling derive from per-epoch seeds spawned off ``config.seed``, so two
runs with the same inputs produce bit-identical parameter trajectories.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from conmask import numkit as nk
from conmask.encoder import FcnLayer, FcnParams
from conmask.errors import DataError, NumericalError
from conmask.evaluator import ConMaskScorer, rank_queries
from conmask.kgdata import EmbeddingTable, KnowledgeGraph
from conmask.model import EncodedCorpus, ModelParams, listwise_loss


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the reference training setup."""

    embedding_dim: int = 200
    max_content_len: int = 512
    max_name_len: int = 512
    mask_window: int = 6
    fcn_layers: int = 3
    conv_width: int = 3
    keep_prob: float = 0.5
    pool_size: int = 2
    batch_size: int = 200
    learning_rate: float = 1e-2
    n_positive: int = 1
    n_negative: int = 4
    max_epochs: int = 200
    seed: int = 0
    freeze_embeddings: bool = False
    checkpoint_interval: int = 25

    def validate(self) -> None:
        positive = ["embedding_dim", "max_content_len", "max_name_len", "fcn_layers",
                    "conv_width", "pool_size", "batch_size", "learning_rate",
                    "n_positive", "max_epochs", "checkpoint_interval"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"config field {name} must be positive")
        if self.mask_window < 0 or self.n_negative < 0:
            raise ValueError("mask_window and n_negative must be >= 0")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in (0, 1], got {self.keep_prob}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def parse_config_file(path) -> TrainConfig:
    """Flat key=value text file mirroring TrainConfig; '#' starts a comment."""
    overrides: dict = {}
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"config line {lineno}: expected key=value")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in fields:
                raise DataError(f"config line {lineno}: unknown key {key!r}")
            kind = fields[key]
            try:
                if kind == "bool":
                    if value.lower() not in ("true", "false", "0", "1"):
                        raise ValueError(value)
                    overrides[key] = value.lower() in ("true", "1")
                elif kind == "int":
                    overrides[key] = int(value)
                else:
                    overrides[key] = float(value)
            except ValueError as exc:
                raise DataError(f"config line {lineno}: bad value for {key}: {value!r}") from exc
    config = TrainConfig(**overrides)
    config.validate()
    return config


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    val_mrr: float | None


def init_params(table: EmbeddingTable, config: TrainConfig) -> ModelParams:
    if table.dim != config.embedding_dim:
        raise DataError(f"config embedding_dim={config.embedding_dim} but the "
                        f"embedding table has k={table.dim}")
    rng = np.random.default_rng([config.seed, 1])
    return ModelParams.init(table, conv_width=config.conv_width,
                            n_layers=config.fcn_layers, rng=rng,
                            freeze_embeddings=config.freeze_embeddings)


def train(graph: KnowledgeGraph, table: EmbeddingTable, config: TrainConfig,
          validation: list[tuple[int, int, int]] | None = None,
          out_dir=None, on_epoch=None, log=None
          ) -> tuple[ModelParams, list[EpochMetrics]]:
    """Train on a graph's triples; returns final params and per-epoch metrics.

    ``on_epoch(epoch, params, mean_loss) -> bool`` may stop training
    early. When ``out_dir`` is given, checkpoints land there every
    ``checkpoint_interval`` epochs plus at the end, and metrics.csv is
    (re)written each epoch. A NaN loss aborts with the last good
    checkpoint left on disk.
    """
    config.validate()
    if not graph.triples:
        raise DataError("training graph has no triples")
    params = init_params(table, config)
    corpus = EncodedCorpus.build(graph, table, config.max_content_len,
                                 config.max_name_len)
    adam = nk.AdamState(lr=config.learning_rate)
    trainable = params.trainable()
    metrics: list[EpochMetrics] = []
    ckpt_path = None if out_dir is None else _pjoin(out_dir, "checkpoint.bin")

    for epoch in range(config.max_epochs):
        rng = np.random.default_rng([config.seed, 2, epoch])
        order = rng.permutation(len(graph.triples))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [graph.triples[i] for i in order[start:start + config.batch_size]]
            loss = listwise_loss(batch, params, corpus, graph, rng,
                                 n_pos=config.n_positive, n_neg=config.n_negative,
                                 mask_window=config.mask_window,
                                 keep_p=config.keep_prob, mode="train")
            if np.isnan(loss.data):
                raise NumericalError(f"NaN loss at epoch {epoch}; last checkpoint "
                                     f"{'kept at ' + str(ckpt_path) if ckpt_path else 'not written'}")
            for p in trainable:
                p.zero_grad()
            loss.backward()
            params.zero_oov_grad()
            nk.adam_update(trainable, adam)
            total += float(loss.data) * len(batch)
            count += len(batch)
        mean_loss = total / count

        val_mrr = None
        if validation:
            scorer = ConMaskScorer(params, corpus, mask_window=config.mask_window)
            report = rank_queries(validation, scorer, graph)
            val_mrr = report.aggregates["all"]["mrr"]
        metrics.append(EpochMetrics(epoch, mean_loss, val_mrr))
        if log:
            log(f"epoch {epoch}: loss {mean_loss:.6f}"
                + (f" val_mrr {val_mrr:.4f}" if val_mrr is not None else ""))
        if out_dir is not None:
            write_metrics_csv(_pjoin(out_dir, "metrics.csv"), metrics)
            if (epoch + 1) % config.checkpoint_interval == 0:
                save_checkpoint(ckpt_path, params, {"config": config.to_dict(),
                                                    "epoch": epoch})
        if on_epoch is not None and on_epoch(epoch, params, mean_loss):
            break
    if out_dir is not None:
        save_checkpoint(ckpt_path, params, {"config": config.to_dict(),
                                            "epoch": metrics[-1].epoch})
    return params, metrics


def _pjoin(base, name):
    import os
    return os.path.join(str(base), name)


def write_metrics_csv(path, metrics: list[EpochMetrics]) -> None:
    import csv
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "val_mrr"])
        for m in metrics:
            writer.writerow([m.epoch, f"{m.mean_loss:.17g}",
                             "" if m.val_mrr is None else f"{m.val_mrr:.17g}"])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"CMCKPT01"
_CKPT_VERSION = 1


def _checkpoint_tensors(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    out = [("embeddings", params.embeddings.data),
           ("feature_weights", params.feature_weights.data)]
    for i, layer in enumerate(params.fcn.layers):
        pre = f"fcn.l{i}."
        out += [
            (pre + "conv1.kernels", layer.conv1_kernels.data),
            (pre + "conv1.bias", layer.conv1_bias.data),
            (pre + "conv2.kernels", layer.conv2_kernels.data),
            (pre + "conv2.bias", layer.conv2_bias.data),
            (pre + "bn.gamma", layer.gamma.data),
            (pre + "bn.beta", layer.beta.data),
            (pre + "bn.moving_mean", layer.bn_state.mean),
            (pre + "bn.moving_var", layer.bn_state.var),
            (pre + "bn.steps", np.asarray(float(layer.bn_state.steps))),
        ]
    return out


def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> None:
    """Versioned binary header + named float64 little-endian tensor blobs."""
    tensors = _checkpoint_tensors(params)
    header = {
        "meta": meta or {},
        "conv_width": params.fcn.conv_width,
        "n_layers": len(params.fcn.layers),
        "channels": params.fcn.channels,
        "embeddings_trainable": params.embeddings_trainable,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Rebuild ModelParams from a checkpoint; returns (params, meta)."""
    with open(path, "rb") as fh:
        if fh.read(8) != _CKPT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise DataError(f"{path}: checkpoint version {version} unsupported "
                            f"(expected {_CKPT_VERSION})")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        blob = fh.read(blob_len)
        if len(blob) != blob_len:
            raise DataError(f"{path}: truncated checkpoint header")
        header = json.loads(blob.decode("utf-8"))
        arrays = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            n_bytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
            raw = fh.read(n_bytes)
            if len(raw) != n_bytes:
                raise DataError(f"{path}: truncated checkpoint tensor {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    channels = header["channels"]
    trainable = header["embeddings_trainable"]
    emb = nk.Tensor(arrays["embeddings"], requires_grad=trainable, name="embeddings")
    layers = []
    for i in range(header["n_layers"]):
        pre = f"fcn.l{i}."
        state = nk.BatchNormState(channels)
        state.mean = arrays[pre + "bn.moving_mean"]
        state.var = arrays[pre + "bn.moving_var"]
        state.steps = int(arrays[pre + "bn.steps"])
        layers.append(FcnLayer(
            conv1_kernels=nk.parameter(arrays[pre + "conv1.kernels"], pre + "conv1.kernels"),
            conv1_bias=nk.parameter(arrays[pre + "conv1.bias"], pre + "conv1.bias"),
            conv2_kernels=nk.parameter(arrays[pre + "conv2.kernels"], pre + "conv2.kernels"),
            conv2_bias=nk.parameter(arrays[pre + "conv2.bias"], pre + "conv2.bias"),
            gamma=nk.parameter(arrays[pre + "bn.gamma"], pre + "bn.gamma"),
            beta=nk.parameter(arrays[pre + "bn.beta"], pre + "bn.beta"),
            bn_state=state,
        ))
    fcn = FcnParams(layers=layers, conv_width=header["conv_width"], channels=channels)
    params = ModelParams(
        embeddings=emb, fcn=fcn,
        feature_weights=nk.parameter(arrays["feature_weights"], "feature_weights"),
        embeddings_trainable=trainable,
    )
    return params, header["meta"]
