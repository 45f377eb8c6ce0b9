"""The table-to-image classifier: embedding, autoencoder, CNN head.

A tabular row x and a 28x28 noise draw r pass through

    embed:   P(x) = ReLU(FC2(ReLU(FC1(x))))        widths N -> N+4 -> N
    encode:  z    = ReLU(FC4(ReLU(FC3(r + P(x))))) widths .. -> 128 -> N
    decode:  img  = sigmoid(FC6(ReLU(FC5(z + P(x))))) reshaped to 28x28
    classify: conv(32) -> pool -> conv(64) -> pool -> fc(128) -> drop -> fc(n)

(+ denotes concatenation). The joint loss is pixel MSE against the
instance's mapped class image plus cross-entropy on the CNN output.
Variant "vif" concatenates a second embedding branch whose first layer is
initialized to 1/VIF_i; "dir" re-initializes FC1 to 1/(VIF_i+10); "mul"
concatenates a trainable per-feature scale initialized to 1/VIF_i.
"""

from __future__ import annotations

import json
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .data import ImagePool, MappingSchema, TabularDataset, gather_mapped_images, sample_mapping
from .errors import ConfigError, FormatError, ShapeError, TrainingDiverged
from .metrics import accuracy, auc
from .nn import AdamW, Conv2d, Linear, Module
from .tensor import Tensor, no_grad
from .vif import VifReport, dir_init_weights, mul_scale_init, vif_init_weights

VARIANTS = ("base", "vif", "dir", "mul")
IMAGE_SIDE = 28
IMAGE_PIXELS = IMAGE_SIDE * IMAGE_SIDE

SNAPSHOT_MAGIC = b"TIMS"
SNAPSHOT_VERSION = 1


@dataclass
class NoiseSpec:
    """Shape and sampling policy of the autoencoder noise input."""

    policy: str = "per-forward"       # or "fixed": one seed-derived draw
    seed: int = 0

    def __post_init__(self):
        if self.policy not in ("per-forward", "fixed"):
            raise ConfigError(f"unknown noise policy {self.policy!r}")


def fixed_noise(seed: int) -> np.ndarray:
    """One deterministic flattened noise image, shared across rows."""
    return np.random.default_rng(seed).standard_normal(IMAGE_PIXELS).astype(np.float32)


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 100
    repeats: int = 3
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    seed: int = 0
    mapping_policy: str = "per-epoch"
    single_mapping: bool = False
    variant: str = "base"
    dropout: float = 0.5
    noise_policy: str = "per-forward"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, pick one of {VARIANTS}")


class TabImageModel(Module):
    def __init__(self, n_features: int, n_classes: int, variant: str = "base",
                 vif_report: VifReport | None = None, dropout_rate: float = 0.5,
                 seed: int = 0, noise: NoiseSpec | None = None):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        if variant != "base" and vif_report is not None \
                and vif_report.n_features != n_features:
            raise ConfigError(f"VIF report covers {vif_report.n_features} features, "
                              f"model has {n_features}")
        self.n_features = n_features
        self.n_classes = n_classes
        self.variant = variant
        self.dropout_rate = dropout_rate
        self.noise = noise or NoiseSpec()
        self.training = True
        self.seed = seed
        self._rng = np.random.default_rng(seed)

        n = n_features
        rng = np.random.default_rng((seed, 1))
        self.embed1 = Linear(n, n + 4, rng)
        self.embed2 = Linear(n + 4, n, rng)
        if variant == "dir" and vif_report is not None:
            self.embed1.weight.data = dir_init_weights(vif_report, n, n + 4)
        if variant == "vif":
            w = None if vif_report is None else vif_init_weights(vif_report, n, n + 4)
            self.vif1 = Linear(n, n + 4, rng, weight=w)
            self.vif2 = Linear(n + 4, n, rng)
        if variant == "mul":
            c = np.ones(n, dtype=np.float32) if vif_report is None \
                else mul_scale_init(vif_report)
            self.scale = Tensor(c, requires_grad=True)

        d_emb = self.embed_width
        self.enc1 = Linear(IMAGE_PIXELS + d_emb, 128, rng)
        self.enc2 = Linear(128, n, rng)
        self.dec1 = Linear(n + d_emb, 128, rng)
        self.dec2 = Linear(128, IMAGE_PIXELS, rng)
        self.conv1 = Conv2d(1, 32, rng)
        self.conv2 = Conv2d(32, 64, rng)
        self.fc7 = Linear(64 * 7 * 7, 128, rng)
        self.fc8 = Linear(128, n_classes, rng)

    @property
    def embed_width(self) -> int:
        return self.n_features if self.variant in ("base", "dir") else 2 * self.n_features

    def train_mode(self, flag: bool = True):
        self.training = flag
        return self

    # ---- forward pieces ------------------------------------------------

    def embed_tabular(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got {x.shape[-1]}")
        base = T.relu(self.embed2(T.relu(self.embed1(x))))
        if self.variant == "vif":
            branch = T.relu(self.vif2(T.relu(self.vif1(x))))
            return T.concat([base, branch], axis=1)
        if self.variant == "mul":
            return T.concat([base, x * self.scale], axis=1)
        return base

    def encode(self, x: Tensor, r: Tensor) -> Tensor:
        if r.shape[-1] != IMAGE_PIXELS:
            raise ShapeError(f"noise must flatten to {IMAGE_PIXELS}, got {r.shape[-1]}")
        h = T.concat([r, self.embed_tabular(x)], axis=1)
        return T.relu(self.enc2(T.relu(self.enc1(h))))

    def decode(self, z: Tensor, x: Tensor) -> Tensor:
        if z.shape[-1] != self.n_features:
            raise ShapeError(f"latent width {z.shape[-1]} != {self.n_features}")
        h = T.concat([z, self.embed_tabular(x)], axis=1)
        flat = T.sigmoid(self.dec2(T.relu(self.dec1(h))))
        return flat.reshape((-1, 1, IMAGE_SIDE, IMAGE_SIDE))

    def classify(self, image: Tensor) -> Tensor:
        h = nn.maxpool2d(T.relu(self.conv1(image)))
        h = nn.maxpool2d(T.relu(self.conv2(h)))
        h = h.reshape((-1, 64 * 7 * 7))
        h = T.relu(self.fc7(h))
        h = nn.dropout(h, self.dropout_rate, self.training, self._rng)
        return T.softmax(self.fc8(h), axis=-1)

    def forward(self, x: Tensor, r: Tensor):
        image = self.decode(self.encode(x, r), x)
        return image, self.classify(image)

    # ---- convenience on raw arrays --------------------------------------

    def sample_noise(self, batch: int) -> np.ndarray:
        if self.noise.policy == "fixed":
            return np.broadcast_to(fixed_noise(self.noise.seed), (batch, IMAGE_PIXELS))
        return self._rng.standard_normal((batch, IMAGE_PIXELS)).astype(np.float32)

    def predict(self, x: np.ndarray, noise: np.ndarray | None = None,
                batch_size: int = 256):
        """Images and class probabilities for a feature matrix, no grad."""
        x = np.asarray(x, dtype=np.float32)
        was_training = self.training
        self.training = False
        images, probs = [], []
        try:
            with no_grad():
                for lo in range(0, x.shape[0], batch_size):
                    xb = x[lo:lo + batch_size]
                    if noise is None:
                        rb = self.sample_noise(xb.shape[0])
                    else:
                        rb = np.broadcast_to(noise, (xb.shape[0], IMAGE_PIXELS))
                    img, p = self.forward(Tensor(xb), Tensor(np.ascontiguousarray(rb)))
                    images.append(img.data[:, 0])
                    probs.append(p.data)
        finally:
            self.training = was_training
        return np.concatenate(images), np.concatenate(probs)

    def named_parameters(self):
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((name, value))
            elif isinstance(value, Module):
                for sub, p in (("weight", getattr(value, "weight", None)),
                               ("bias", getattr(value, "bias", None)),
                               ("kernels", getattr(value, "kernels", None))):
                    if isinstance(p, Tensor) and p.requires_grad:
                        out.append((f"{name}.{sub}", p))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def total_loss(image: Tensor, probs: Tensor, target_image: Tensor,
               y: np.ndarray):
    """Unweighted sum of pixel reconstruction MSE and cross-entropy."""
    recon = nn.mse(image, target_image)
    cls = nn.cross_entropy(probs, y)
    return recon + cls, recon, cls


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochStats:
    epoch: int
    loss_recon: float
    loss_cls: float
    test_accuracy: float
    test_auc: float | None


@dataclass
class RunRecord:
    seed: int
    best_epoch: int
    best_accuracy: float
    best_auc: float | None
    epochs: list[EpochStats] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0


@dataclass
class FitResult:
    models: list[TabImageModel]
    runs: list[RunRecord]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([r.best_accuracy for r in self.runs]))

    @property
    def mean_auc(self) -> float | None:
        vals = [r.best_auc for r in self.runs if r.best_auc is not None]
        return float(np.mean(vals)) if vals else None


def fit(train: TabularDataset, test: TabularDataset, pool: ImagePool,
        config: TrainConfig, vif_report: VifReport | None = None,
        log_path=None) -> FitResult:
    """Train ``config.repeats`` independently seeded models.

    Every epoch re-samples the instance -> image mapping (unless the
    policy is fixed), runs shuffled mini-batches of AdamW updates on the
    joint loss, and scores test accuracy/AUC; the parameters of the best
    test-accuracy epoch are kept per run.
    """
    if train.n_classes > pool.n_classes:
        raise ConfigError(f"pool has {pool.n_classes} classes, dataset needs "
                          f"{train.n_classes}")
    log_fh = open(log_path, "w") if log_path else None
    models, runs = [], []
    try:
        for rep in range(config.repeats):
            seed = config.seed + rep
            model, record = _fit_single(train, test, pool, config, seed,
                                        vif_report, log_fh)
            models.append(model)
            runs.append(record)
    finally:
        if log_fh:
            log_fh.close()
    return FitResult(models=models, runs=runs)


def _fit_single(train, test, pool, config, seed, vif_report, log_fh):
    start = time.monotonic()
    model = TabImageModel(
        train.n_features, train.n_classes, variant=config.variant,
        vif_report=vif_report, dropout_rate=config.dropout, seed=seed,
        noise=NoiseSpec(policy=config.noise_policy, seed=seed))
    opt = AdamW(model.parameters(), lr=config.lr, betas=config.betas,
                eps=config.eps, weight_decay=config.weight_decay)
    schema = MappingSchema(seed=seed, policy=config.mapping_policy,
                           single_image=config.single_mapping)
    shuffle_rng = np.random.default_rng((seed, 101))
    eval_noise = fixed_noise(seed)
    x_train = train.x.astype(np.float32)

    record = RunRecord(seed=seed, best_epoch=-1, best_accuracy=-1.0, best_auc=None)
    best_params = None

    for epoch in range(config.epochs):
        assignment = sample_mapping(train, pool, schema, epoch)
        order = shuffle_rng.permutation(train.n_rows)
        model.train_mode(True)
        recon_sum = cls_sum = 0.0
        n_batches = 0
        for lo in range(0, train.n_rows, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            xb = Tensor(x_train[idx])
            yb = train.y[idx]
            targets = gather_mapped_images(yb, assignment[idx], pool)
            tb = Tensor(targets.reshape(-1, 1, IMAGE_SIDE, IMAGE_SIDE))
            rb = Tensor(model.sample_noise(idx.size))

            image, probs = model.forward(xb, rb)
            loss, recon, cls = total_loss(image, probs, tb, yb)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {n_batches}")
            opt.zero_grad()
            loss.backward()
            opt.step()

            record.batch_losses.append(loss.item())
            recon_sum += recon.item()
            cls_sum += cls.item()
            n_batches += 1

        _, test_probs = model.predict(test.x, noise=eval_noise)
        stats = EpochStats(
            epoch=epoch,
            loss_recon=recon_sum / n_batches,
            loss_cls=cls_sum / n_batches,
            test_accuracy=accuracy(test_probs, test.y),
            test_auc=auc(test_probs, test.y))
        record.epochs.append(stats)
        if log_fh:
            log_fh.write(json.dumps({
                "seed": seed, "epoch": epoch,
                "loss_recon": stats.loss_recon, "loss_cls": stats.loss_cls,
                "test_accuracy": stats.test_accuracy,
                "test_auc": stats.test_auc}) + "\n")
        if stats.test_accuracy > record.best_accuracy:
            record.best_accuracy = stats.test_accuracy
            record.best_auc = stats.test_auc
            record.best_epoch = epoch
            best_params = [p.data.copy() for p in model.parameters()]

    for p, saved in zip(model.parameters(), best_params):
        p.data = saved
    model.train_mode(False)
    record.wall_time_s = time.monotonic() - start
    return model, record


# ---------------------------------------------------------------------------
# reverse reconstruction (image -> tabular row)


class ReverseReconstructor(Module):
    """Mirror of the decoder + embedding, recovering x from the image."""

    def __init__(self, n_features: int, seed: int = 0):
        rng = np.random.default_rng((seed, 2))
        n = n_features
        self.r1 = Linear(IMAGE_PIXELS, 128, rng)
        self.r2 = Linear(128, n, rng)
        self.inv1 = Linear(n, n + 4, rng)
        self.inv2 = Linear(n + 4, n, rng)
        self.n_features = n

    def forward(self, img_flat: Tensor) -> Tensor:
        z = self.r2(T.relu(self.r1(img_flat)))
        return self.inv2(T.relu(self.inv1(z)))

    def apply(self, images: np.ndarray) -> np.ndarray:
        """(m, 28, 28) -> (m, N) without building a graph."""
        with no_grad():
            out = self.forward(Tensor(images.reshape(-1, IMAGE_PIXELS).astype(np.float32)))
        return out.data


def train_reverse(model: TabImageModel, train: TabularDataset,
                  epochs: int = 100, batch_size: int = 64, lr: float = 1e-3,
                  seed: int = 0) -> tuple[ReverseReconstructor, list[float]]:
    """Fit the reverse reconstructor on a frozen model.

    Minimizes MSE between reconstructor(AE(x, r)) and x over the training
    split; returns the reconstructor and per-epoch loss means.
    """
    recon = ReverseReconstructor(model.n_features, seed=seed)
    opt = AdamW(recon.parameters(), lr=lr)
    rng = np.random.default_rng((seed, 3))
    x_train = train.x.astype(np.float32)
    epoch_losses = []
    was_training = model.training
    model.train_mode(False)
    try:
        for epoch in range(epochs):
            order = rng.permutation(train.n_rows)
            total = 0.0
            n_batches = 0
            for lo in range(0, train.n_rows, batch_size):
                idx = order[lo:lo + batch_size]
                xb = x_train[idx]
                with no_grad():
                    rb = Tensor(model.sample_noise(idx.size))
                    images, _ = model.forward(Tensor(xb), rb)
                pred = recon(Tensor(images.data.reshape(-1, IMAGE_PIXELS)))
                loss = nn.mse(pred, Tensor(xb))
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"non-finite reverse loss at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item()
                n_batches += 1
            epoch_losses.append(total / n_batches)
    finally:
        model.train_mode(was_training)
    return recon, epoch_losses


# ---------------------------------------------------------------------------
# artifacts: PGM dumps, snapshots


def write_pgm(path, image: np.ndarray):
    """Binary PGM (P5, maxval 255); input pixels are floats in [0, 1]."""
    data8 = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = data8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data8.tobytes())


def dump_images(model: TabImageModel, x: np.ndarray, y: np.ndarray,
                pool: ImagePool, out_dir, sample_ids=None, noise_seed: int = 0):
    """Write one PGM per sample plus an index CSV (sample, class, source)."""
    os.makedirs(out_dir, exist_ok=True)
    ids = list(sample_ids) if sample_ids is not None else list(range(len(y)))
    images, _ = model.predict(x, noise=fixed_noise(noise_seed))
    index_path = os.path.join(out_dir, "index.csv")
    with open(index_path, "w") as fh:
        fh.write("sample,class,source\n")
        for k, sid in enumerate(ids):
            name = f"sample_{sid}.pgm"
            write_pgm(os.path.join(out_dir, name), images[k])
            fh.write(f"{sid},{int(y[k])},{pool.source_names[int(y[k])]}\n")
    return index_path


def save_snapshot(model: TabImageModel, path):
    """Binary parameter snapshot with a versioned JSON header."""
    named = model.named_parameters()
    header = {
        "version": SNAPSHOT_VERSION,
        "n_features": model.n_features,
        "n_classes": model.n_classes,
        "variant": model.variant,
        "dropout_rate": model.dropout_rate,
        "seed": model.seed,
        "params": [{"name": n, "shape": list(p.shape)} for n, p in named],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack(">II", SNAPSHOT_VERSION, len(blob)))
        fh.write(blob)
        for _, p in named:
            fh.write(p.data.astype("<f4").tobytes())


def load_snapshot(path) -> TabImageModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SNAPSHOT_MAGIC:
            raise FormatError(f"{path}: not a model snapshot (magic {magic!r})")
        version, header_len = struct.unpack(">II", fh.read(8))
        if version != SNAPSHOT_VERSION:
            raise FormatError(f"{path}: unsupported snapshot version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        model = TabImageModel(
            header["n_features"], header["n_classes"], variant=header["variant"],
            dropout_rate=header["dropout_rate"], seed=header.get("seed", 0))
        named = dict(model.named_parameters())
        for spec in header["params"]:
            shape = tuple(spec["shape"])
            n_bytes = int(np.prod(shape)) * 4
            raw = fh.read(n_bytes)
            if len(raw) != n_bytes:
                raise FormatError(f"{path}: truncated parameter {spec['name']}")
            if spec["name"] not in named:
                raise FormatError(f"{path}: unknown parameter {spec['name']}")
            named[spec["name"]].data = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    model.train_mode(False)
    return model
