"""Joint training of autoencoder, contrastive critic and latent diffusion prior.

One optimizer step minimizes ``recon + diffusion_weight * diff + lam * cpc``.
The query encoder sees the clean image; its posterior mean is the contrastive
anchor and an augmented view through the momentum key encoder is the positive.
The other images' keys in the batch (plus an optional queue) are negatives.
"""

from __future__ import annotations

import csv
import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import Tensor, no_grad
from .autoencoder import (
    Decoder,
    Encoder,
    LatentStats,
    denormalize,
    fit_latent_stats,
    normalize,
    reconstruction_loss,
    reparameterize,
)
from .config import TrainConfig
from .contrastive import AugmentationPolicy, Critic, NegativeStore, augment_batch, cpc_loss, momentum_update
from .data import SyntheticSpec, TensorArchive, generate_synthetic, load_archive, load_idx
from .diffusion import NoisePredictor, SamplerSpec, diffusion_loss, sample
from .errors import CorruptFile, CorruptHeader, NonFiniteLoss, TruncatedPayload
from .nn import AdamW
from .schedule import AlphaSchedule, make_cumulative_schedule, uniform_weights, variational_weights

METRIC_COLUMNS = ("epoch", "recon", "diff", "cpc", "total", "probe_acc", "fid")
CKPT_MAGIC = b"D2C1"
CKPT_VERSION = 1
DTYPE_TAGS = {1: "<f4", 2: "<f8", 3: "u1"}  # 3: raw bytes (text blobs)
SCHEDULE_KIND = "cumulative-linear"


# -- model state ---------------------------------------------------------------------------


@dataclass
class D2CModel:
    config: TrainConfig
    encoder: Encoder
    decoder: Decoder
    predictor: NoisePredictor
    critic: Critic
    key_encoder: Encoder
    stats: LatentStats
    schedule: AlphaSchedule
    step: int = 0

    @classmethod
    def initialize(cls, config: TrainConfig) -> "D2CModel":
        shape, k, s = config.image_shape, config.latent_dim, config.seed
        enc = Encoder(shape, k, config.int_tuple("enc_hidden"), seed=s * 10 + 0)
        key = Encoder(shape, k, config.int_tuple("enc_hidden"), seed=s * 10 + 0)
        return cls(
            config=config,
            encoder=enc,
            decoder=Decoder(shape, k, config.int_tuple("dec_hidden"), seed=s * 10 + 1),
            predictor=NoisePredictor(k, config.pred_width, config.pred_blocks, seed=s * 10 + 2),
            critic=Critic(k, config.proj_dim, config.tau, seed=s * 10 + 3),
            key_encoder=key,
            stats=LatentStats(np.zeros(k), np.ones(k)),
            schedule=make_cumulative_schedule(config.T, config.beta_min, config.beta_max),
        )

    def modules(self) -> dict:
        return {
            "encoder": self.encoder,
            "decoder": self.decoder,
            "predictor": self.predictor,
            "critic": self.critic,
            "key_encoder": self.key_encoder,
        }

    def encode(self, x, rng: np.random.Generator | None = None, deterministic: bool = True, chunk: int = 1024):
        x = np.asarray(x, dtype=np.float64)
        out = []
        with no_grad():
            for i in range(0, len(x), chunk):
                mean, logvar = self.encoder(x[i : i + chunk])
                if deterministic:
                    out.append(mean.value)
                else:
                    if rng is None:
                        raise ValueError("stochastic encode needs an rng")
                    out.append(mean.value + np.exp(0.5 * logvar.value) * rng.standard_normal(mean.shape))
        return np.concatenate(out)

    def decode(self, z, chunk: int = 1024) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        with no_grad():
            parts = [self.decoder(z[i : i + chunk]).value for i in range(0, len(z), chunk)]
        return np.clip(np.concatenate(parts), 0.0, 1.0)

    def normalize(self, z):
        return normalize(z, self.stats)

    def denormalize(self, z):
        return denormalize(z, self.stats)

    def prior_sample(
        self,
        n: int,
        rng: np.random.Generator,
        steps: int = 100,
        kind: str = "ddim",
        noise: np.ndarray | None = None,
    ) -> np.ndarray:
        """Latents in encoder coordinates drawn from the diffusion prior."""
        spec = SamplerSpec(kind, self.schedule, steps)
        return self.denormalize(sample(self.predictor, spec, n, rng, noise=noise))

    def refit_stats(self, images: np.ndarray, limit: int = 4000) -> None:
        self.stats = fit_latent_stats(self.encode(images[:limit]))


def augmentation_policy(config: TrainConfig) -> AugmentationPolicy:
    j = config.jitter_strength
    return AugmentationPolicy(
        crop_scale=(config.crop_scale_min, 1.0),
        flip_prob=config.flip_prob,
        jitter_prob=config.jitter_prob,
        brightness=j,
        contrast=j,
        saturation=j,
        grayscale_prob=config.grayscale_prob,
    )


# -- one optimization step -----------------------------------------------------------------


@dataclass
class StepReport:
    recon: float
    diff: float
    cpc: float
    total: float


@dataclass
class Trainer:
    model: D2CModel
    optimizer: AdamW
    policy: AugmentationPolicy
    weights: object
    queue: NegativeStore | None = None
    history: list[StepReport] = field(default_factory=list)

    @classmethod
    def create(cls, model: D2CModel) -> "Trainer":
        cfg = model.config
        params = [p for name in ("encoder", "decoder", "predictor", "critic") for p in model.modules()[name].parameters()]
        opt = AdamW(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
        if cfg.weights == "uniform":
            weights = uniform_weights(model.schedule)
        else:
            weights = variational_weights(model.schedule, cfg.latent_dim)
        queue = NegativeStore(cfg.queue_size) if cfg.queue_size > 0 else None
        return cls(model, opt, augmentation_policy(cfg), weights, queue)

    def losses(self, x: np.ndarray, rng: np.random.Generator) -> tuple[Tensor, Tensor, Tensor]:
        """Reconstruction, diffusion and contrastive losses for one batch (graph attached)."""
        m = self.model
        x = np.asarray(x, dtype=np.float64)
        n = len(x)
        views = augment_batch(x, self.policy, rng)
        mean, logvar = m.encoder(x)
        z = reparameterize(mean, logvar, rng.standard_normal(mean.shape))
        recon = reconstruction_loss(m.decoder, x, z, m.config.sigma_pix)
        zn = (z - m.stats.mean) * (1.0 / m.stats.std)
        diff = diffusion_loss(m.predictor, zn, m.schedule, self.weights, rng)

        with no_grad():
            keys = m.key_encoder(views)[0].value
        # negatives for anchor i: every other image's key, then queued keys
        others = np.stack([np.delete(keys, i, axis=0) for i in range(n)])
        if self.queue is not None and len(self.queue):
            q = self.queue.items()
            others = np.concatenate([others, np.broadcast_to(q, (n, *q.shape))], axis=1)
        cpc = cpc_loss(m.critic, (mean, Tensor(keys)), others)
        if not np.isfinite(cpc.value):
            raise NonFiniteLoss("contrastive loss is not finite", component="contrastive")
        if self.queue is not None:
            self.queue.push(keys)
        return recon, diff, cpc

    def step(self, x: np.ndarray, rng: np.random.Generator) -> StepReport:
        cfg = self.model.config
        recon, diff, cpc = self.losses(x, rng)
        total = recon + diff * cfg.diffusion_weight + cpc * cfg.lam
        if not np.isfinite(total.value):
            raise NonFiniteLoss("total loss is not finite", component="trainer")
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        momentum_update(self.model.key_encoder.params, self.model.encoder.params, cfg.key_momentum)
        self.model.step += 1
        report = StepReport(float(recon.value), float(diff.value), float(cpc.value), float(total.value))
        self.history.append(report)
        return report


def train_step(trainer: Trainer, batch: np.ndarray, rng: np.random.Generator) -> StepReport:
    return trainer.step(batch, rng)


# -- data and metrics ---------------------------------------------------------------------


def load_dataset(config: TrainConfig) -> TensorArchive:
    if config.dataset == "synthetic":
        spec = SyntheticSpec(
            size=config.image_size,
            channels=config.channels,
            disc_rate=config.disc_rate,
            warm_rate=config.warm_rate,
            quadrant_probs=config.float_tuple("quadrant_probs"),
            count=config.n_images,
            seed=config.data_seed,
        )
        return generate_synthetic(spec)
    path = Path(config.dataset)
    if path.suffix in (".idx", ".ubyte") or "idx" in path.name:
        return load_idx(path)
    return load_archive(path)


def split_dataset(data: TensorArchive, holdout: float) -> tuple[TensorArchive, TensorArchive]:
    n_train = int(round(len(data) * (1.0 - holdout)))
    idx = np.arange(len(data))
    return data.subset(idx[:n_train]), data.subset(idx[n_train:])


def probe_accuracy(model: D2CModel, held: TensorArchive, attribute: str, n_labels: int) -> float:
    """Logistic probe fitted on the first ``n_labels`` held-out latents, scored on the rest."""
    from .evaluation import linear_probe
    from .errors import SingleClassInput

    if not held.attributes or n_labels >= len(held):
        return float("nan")
    attr, value = attribute.split("=", 1)
    y = held.labels(attr, value)
    mask = np.zeros(len(held), dtype=bool)
    mask[:n_labels] = True
    try:
        return linear_probe(model.encode(held.images), y, mask)
    except SingleClassInput:
        return float("nan")


def _fmt(v: float) -> str:
    return "nan" if v != v else repr(float(v))


@dataclass
class TrainResult:
    model: D2CModel
    metrics: list[dict]

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in self.metrics:
            w.writerow([row["epoch"], *(_fmt(row[c]) for c in METRIC_COLUMNS[1:])])
        return buf.getvalue()


def train(
    config: TrainConfig,
    data: TensorArchive | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Joint epochs, then optional prior-only epochs on frozen autoencoder latents."""
    data = load_dataset(config) if data is None else data
    if tuple(data.images.shape[1:]) != config.image_shape:
        raise ValueError(f"dataset images {data.images.shape[1:]} do not match config {config.image_shape}")
    train_set, held = split_dataset(data, config.holdout)
    images = train_set.images.astype(np.float64)
    if len(images) < config.batch_size:
        raise ValueError("training split smaller than one batch")
    model = D2CModel.initialize(config)
    trainer = Trainer.create(model)
    rng = np.random.default_rng(config.seed)
    fid_state = _FidState(config, data) if config.fid_every > 0 else None
    metrics: list[dict] = []

    def record(epoch, recon, diff, cpc, total):
        row = {
            "epoch": epoch,
            "recon": recon,
            "diff": diff,
            "cpc": cpc,
            "total": total,
            "probe_acc": probe_accuracy(model, held, config.probe_attribute, config.probe_labels),
            "fid": fid_state.score(model, epoch) if fid_state else float("nan"),
        }
        metrics.append(row)
        if log:
            log(" ".join(f"{k}={_fmt(v) if k != 'epoch' else v}" for k, v in row.items()))

    n_batches = len(images) // config.batch_size
    for epoch in range(1, config.epochs + 1):
        model.refit_stats(images)
        perm = rng.permutation(len(images))
        reps = [
            trainer.step(images[perm[b * config.batch_size : (b + 1) * config.batch_size]], rng)
            for b in range(n_batches)
        ]
        record(
            epoch,
            float(np.mean([r.recon for r in reps])),
            float(np.mean([r.diff for r in reps])),
            float(np.mean([r.cpc for r in reps])),
            float(np.mean([r.total for r in reps])),
        )

    model.refit_stats(images)
    if config.prior_epochs > 0:
        _refine_prior(model, images, config, rng, record)
    return TrainResult(model, metrics)


def _refine_prior(model: D2CModel, images, config: TrainConfig, rng, record) -> None:
    """Train the diffusion prior alone on latents of the frozen encoder."""
    opt = AdamW(
        model.predictor.parameters(),
        lr=config.prior_lr,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )
    weights = uniform_weights(model.schedule) if config.weights == "uniform" else variational_weights(
        model.schedule, config.latent_dim
    )
    with no_grad():
        mean, logvar = model.encoder(images)
    mean, std = mean.value, np.exp(0.5 * logvar.value)
    bs = config.prior_batch_size
    n_batches = max(1, len(images) // bs)
    for i in range(config.prior_epochs):
        perm = rng.permutation(len(images))
        losses = []
        for b in range(n_batches):
            idx = perm[b * bs : (b + 1) * bs]
            z = mean[idx] + std[idx] * rng.standard_normal(mean[idx].shape)
            loss = diffusion_loss(model.predictor, model.normalize(z), model.schedule, weights, rng)
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.step += 1
            losses.append(float(loss.value))
        d = float(np.mean(losses))
        record(config.epochs + i + 1, float("nan"), d, float("nan"), config.diffusion_weight * d)


class _FidState:
    def __init__(self, config: TrainConfig, data: TensorArchive):
        from .evaluation import fit_feature_extractor

        self.config = config
        _, held = split_dataset(data, config.holdout)
        self.real = held.images.astype(np.float64)
        targets = {a: _codes(data, a) for a in data.attributes[0]} if data.attributes else {}
        if not targets:
            targets = {"dummy": np.zeros(len(data), dtype=int)}
        self.extractor = fit_feature_extractor(data.images.astype(np.float64), targets, seed=config.seed)

    def score(self, model: D2CModel, epoch: int) -> float:
        from .evaluation import toy_fid

        if epoch % self.config.fid_every or len(self.real) < 100:
            return float("nan")
        rng = np.random.default_rng([self.config.seed, epoch])
        z = model.prior_sample(self.config.fid_samples, rng, steps=self.config.fid_steps)
        return toy_fid(self.extractor, self.real, model.decode(z))


def _codes(data: TensorArchive, attribute: str) -> np.ndarray:
    values = sorted({a[attribute] for a in data.attributes})
    lookup = {v: i for i, v in enumerate(values)}
    return np.array([lookup[a[attribute]] for a in data.attributes], dtype=int)


# -- binary table container and checkpoints ------------------------------------------------


def tables_to_bytes(tables: dict[str, np.ndarray]) -> bytes:
    """Little-endian container: magic, version, count, named typed arrays, CRC32."""
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<II", CKPT_VERSION, len(tables))
    for name, arr in tables.items():
        arr = np.asarray(arr)
        if arr.dtype == np.uint8:
            tag = 3
        elif arr.dtype == np.float32:
            tag = 1
        else:
            tag, arr = 2, arr.astype(np.float64)
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", tag, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes()
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


def tables_from_bytes(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 16 or data[:4] != CKPT_MAGIC:
        raise CorruptHeader("not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise CorruptHeader(f"unsupported checkpoint version {version}")
    (crc,) = struct.unpack("<I", data[-4:])
    body_end = len(data) - 4
    off = 12
    tables: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            tag, rank = struct.unpack_from("<BB", data, off)
            off += 2
            if tag not in DTYPE_TAGS:
                raise CorruptFile(f"unknown dtype tag {tag} in table {name!r}")
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            dt = np.dtype(DTYPE_TAGS[tag])
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + size > body_end:
                raise TruncatedPayload(f"table {name!r} runs past the end of the file")
            tables[name] = np.frombuffer(data, dtype=dt, count=size // dt.itemsize, offset=off).reshape(dims).copy()
            off += size
    except (struct.error, UnicodeDecodeError) as exc:
        raise TruncatedPayload(f"checkpoint ends mid-table: {exc}") from exc
    if off != body_end:
        raise TruncatedPayload("checkpoint length disagrees with its table directory")
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CorruptFile("checkpoint CRC mismatch")
    return tables


def _text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8)


def checkpoint_tables(model: D2CModel) -> dict[str, np.ndarray]:
    tables: dict[str, np.ndarray] = {}
    for prefix, mod in model.modules().items():
        for name, value in mod.state_dict().items():
            tables[f"{prefix}/{name}"] = value
    tables["stats/mean"] = model.stats.mean
    tables["stats/std"] = model.stats.std
    tables["schedule/alphas"] = model.schedule.alphas
    tables["schedule/kind"] = _text(SCHEDULE_KIND)
    tables["meta/step"] = np.array([model.step], dtype=np.float64)
    tables["meta/config"] = _text(model.config.to_text())
    return tables


def save_checkpoint(model: D2CModel, path) -> None:
    Path(path).write_bytes(tables_to_bytes(checkpoint_tables(model)))


def model_from_tables(tables: dict[str, np.ndarray]) -> D2CModel:
    try:
        config = TrainConfig.from_text(tables["meta/config"].tobytes().decode("utf-8"))
        model = D2CModel.initialize(config)
        for prefix, mod in model.modules().items():
            pre = prefix + "/"
            mod.load_state_dict({k[len(pre) :]: v for k, v in tables.items() if k.startswith(pre)})
        model.stats = LatentStats(tables["stats/mean"].copy(), tables["stats/std"].copy())
        model.schedule = AlphaSchedule(tables["schedule/alphas"].copy())
        model.step = int(tables["meta/step"][0])
    except (KeyError, ValueError) as exc:
        raise CorruptFile(f"checkpoint contents are inconsistent: {exc}") from exc
    return model


def load_checkpoint(path) -> D2CModel:
    return model_from_tables(tables_from_bytes(Path(path).read_bytes()))


def write_metrics(result: TrainResult, path) -> None:
    Path(path).write_text(result.metrics_csv(), encoding="utf-8")


__all__ = [
    "CKPT_MAGIC",
    "METRIC_COLUMNS",
    "D2CModel",
    "StepReport",
    "TrainResult",
    "Trainer",
    "checkpoint_tables",
    "load_checkpoint",
    "load_dataset",
    "model_from_tables",
    "probe_accuracy",
    "save_checkpoint",
    "split_dataset",
    "tables_from_bytes",
    "tables_to_bytes",
    "train",
    "train_step",
    "write_metrics",
]
