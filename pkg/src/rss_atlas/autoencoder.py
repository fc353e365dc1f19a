"""Distance-invariant sparse autoencoder, trained with plain numpy.

Both halves are two dense layers. The hidden layer of each half runs
dense -> tanh -> batch norm -> dropout; the latent and reconstruction
heads are linear so neither latent distances nor dBm-scale outputs get
range-clipped. Training minimizes the sum of a squared-L2 reconstruction
loss, an L1 penalty on the latent activations, and a pairwise distance
invariance penalty that pulls latent geometry toward input geometry.

Backpropagation is written out by hand, including the pass through the
batch statistics, and is verified against central finite differences in
the test suite.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import SurveyDataset, NormalizationStats
from .errors import ConfigError, DataError, TrainingDivergedError

MODEL_FORMAT_VERSION = 1
BN_EPS = 1e-5

PARAM_KEYS = (
    "enc_hidden.weights", "enc_hidden.biases", "enc_hidden.bn_gamma", "enc_hidden.bn_beta",
    "enc_out.weights", "enc_out.biases",
    "dec_hidden.weights", "dec_hidden.biases", "dec_hidden.bn_gamma", "dec_hidden.bn_beta",
    "dec_out.weights", "dec_out.biases",
)


@dataclass
class LayerParams:
    """One dense layer; batch-norm tensors are present on hidden layers only."""

    weights: np.ndarray  # (out, in)
    biases: np.ndarray   # (out,)
    bn_gamma: np.ndarray | None = None
    bn_beta: np.ndarray | None = None
    bn_running_mean: np.ndarray | None = None
    bn_running_var: np.ndarray | None = None

    @property
    def has_batchnorm(self) -> bool:
        return self.bn_gamma is not None

    def copy(self) -> "LayerParams":
        cp = lambda a: None if a is None else a.copy()
        return LayerParams(
            weights=self.weights.copy(), biases=self.biases.copy(),
            bn_gamma=cp(self.bn_gamma), bn_beta=cp(self.bn_beta),
            bn_running_mean=cp(self.bn_running_mean), bn_running_var=cp(self.bn_running_var),
        )


@dataclass
class AutoencoderParams:
    """Encoder and decoder weights plus batch-norm state.

    Dimension chain: input_dim -> hidden_dims[0] -> latent_dim ->
    hidden_dims[1] -> input_dim, with latent_dim < input_dim enforced.
    """

    enc_hidden: LayerParams
    enc_out: LayerParams
    dec_hidden: LayerParams
    dec_out: LayerParams
    input_dim: int
    latent_dim: int
    hidden_dims: tuple[int, int]
    train_config: "TrainConfig | None" = None

    def __post_init__(self):
        if not self.latent_dim < self.input_dim:
            raise ConfigError(
                f"latent_dim {self.latent_dim} must be smaller than input_dim {self.input_dim}"
            )
        chain = [
            (self.enc_hidden.weights.shape, (self.hidden_dims[0], self.input_dim)),
            (self.enc_out.weights.shape, (self.latent_dim, self.hidden_dims[0])),
            (self.dec_hidden.weights.shape, (self.hidden_dims[1], self.latent_dim)),
            (self.dec_out.weights.shape, (self.input_dim, self.hidden_dims[1])),
        ]
        for got, want in chain:
            if got != want:
                raise ConfigError(f"inconsistent layer shape {got}, expected {want}")

    def copy(self) -> "AutoencoderParams":
        return AutoencoderParams(
            enc_hidden=self.enc_hidden.copy(), enc_out=self.enc_out.copy(),
            dec_hidden=self.dec_hidden.copy(), dec_out=self.dec_out.copy(),
            input_dim=self.input_dim, latent_dim=self.latent_dim,
            hidden_dims=self.hidden_dims, train_config=self.train_config,
        )

    def get_tensor(self, key: str) -> np.ndarray:
        layer_name, attr = key.split(".")
        return getattr(getattr(self, layer_name), attr)

    def set_tensor(self, key: str, value: np.ndarray) -> None:
        layer_name, attr = key.split(".")
        setattr(getattr(self, layer_name), attr, value)

    def tensor_keys(self) -> tuple[str, ...]:
        return PARAM_KEYS


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and architecture settings; every field has a default."""

    latent_dim: int = 10
    hidden_dim: int = 60
    lambda_r: float = 1e-4
    lambda_d: float = 1e-3
    distance_mode: str = "squared"  # "squared" compares squared distances, "absolute" plain ones
    batch_size: int = 64
    epochs: int = 2000
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout_rate: float = 0.1
    bn_momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1 or self.hidden_dim < 1:
            raise ConfigError("latent_dim and hidden_dim must be >= 1")
        if self.lambda_r < 0 or self.lambda_d < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.distance_mode not in ("squared", "absolute"):
            raise ConfigError(f"unknown distance_mode {self.distance_mode!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm needs it)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ConfigError("bn_momentum must lie in (0, 1)")


@dataclass
class TrainReport:
    """Per-epoch loss totals as seen by the optimizer, plus summary numbers.

    The distance term is recorded with its 1/batch_size^2 scaling applied,
    i.e. exactly what was minimized. final_rmse is in the training data's
    units; final_rmse_dbm is filled in when normalization stats are given.
    """

    recon_losses: list[float] = field(default_factory=list)
    sparsity_losses: list[float] = field(default_factory=list)
    distance_losses: list[float] = field(default_factory=list)
    final_rmse: float = float("nan")
    final_rmse_dbm: float | None = None
    wall_seconds: float = 0.0


def init_params(input_dim: int, config: TrainConfig) -> AutoencoderParams:
    """Seeded Glorot-uniform weights, zero biases, identity batch norm."""
    rng = np.random.default_rng(config.seed)
    h, c = config.hidden_dim, config.latent_dim

    def dense(out_dim, in_dim, with_bn):
        bound = math.sqrt(6.0 / (in_dim + out_dim))
        layer = LayerParams(
            weights=rng.uniform(-bound, bound, size=(out_dim, in_dim)),
            biases=np.zeros(out_dim),
        )
        if with_bn:
            layer.bn_gamma = np.ones(out_dim)
            layer.bn_beta = np.zeros(out_dim)
            layer.bn_running_mean = np.zeros(out_dim)
            layer.bn_running_var = np.ones(out_dim)
        return layer

    return AutoencoderParams(
        enc_hidden=dense(h, input_dim, True),
        enc_out=dense(c, h, False),
        dec_hidden=dense(h, c, True),
        dec_out=dense(input_dim, h, False),
        input_dim=input_dim, latent_dim=c, hidden_dims=(h, h),
    )


def _half_forward(hidden: LayerParams, head: LayerParams, x, mode, dropout_rate, rng):
    """dense -> tanh -> batch norm -> dropout -> dense(linear)."""
    a = x @ hidden.weights.T + hidden.biases
    t = np.tanh(a)
    if mode == "training":
        mu = t.mean(axis=0)
        var = t.var(axis=0)
    else:
        mu = hidden.bn_running_mean
        var = hidden.bn_running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (t - mu) * inv_std
    y = hidden.bn_gamma * xhat + hidden.bn_beta
    if mode == "training" and dropout_rate > 0.0:
        mask = (rng.random(y.shape) >= dropout_rate) / (1.0 - dropout_rate)
        d = y * mask
    else:
        mask = None
        d = y
    out = d @ head.weights.T + head.biases
    cache = {
        "x": x, "t": t, "xhat": xhat, "inv_std": inv_std, "mask": mask, "d": d,
        "batch_mean": mu if mode == "training" else None,
        "batch_var": var if mode == "training" else None,
        "mode": mode,
    }
    return out, cache


def forward(
    params: AutoencoderParams,
    batch: np.ndarray,
    mode: str = "inference",
    seed: int = 0,
    dropout_rate: float = 0.0,
):
    """Run the full network; returns (latent, reconstruction, cache).

    Training mode standardizes with batch statistics and applies inverted
    dropout using masks drawn from the seed; inference mode uses the
    running statistics and no dropout, so it is deterministic and
    row-independent.
    """
    batch = np.asarray(batch, dtype=float)
    if batch.ndim != 2 or batch.shape[1] != params.input_dim:
        raise DataError(f"batch must be b x {params.input_dim}, got {batch.shape}")
    if mode not in ("training", "inference"):
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == "training" and batch.shape[0] < 2:
        raise DataError("training mode needs batch_size >= 2 for batch statistics")
    rng = np.random.default_rng(seed)
    latent, enc_cache = _half_forward(
        params.enc_hidden, params.enc_out, batch, mode, dropout_rate, rng
    )
    recon, dec_cache = _half_forward(
        params.dec_hidden, params.dec_out, latent, mode, dropout_rate, rng
    )
    cache = {"enc": enc_cache, "dec": dec_cache, "latent": latent, "recon": recon}
    return latent, recon, cache


def reconstruction_loss(z: np.ndarray, z_hat: np.ndarray) -> float:
    """Squared L2 norm of the residual, summed over the batch."""
    if z.shape != z_hat.shape:
        raise DataError(f"shape mismatch {z.shape} vs {z_hat.shape}")
    r = z - z_hat
    return float(np.sum(r * r))


def sparsity_loss(latent: np.ndarray, lambda_r: float) -> float:
    """L1 penalty on latent activations, summed over the batch."""
    return float(lambda_r * np.sum(np.abs(latent)))


def _pairwise_sq_dists(P: np.ndarray) -> np.ndarray:
    d = P[:, None, :] - P[None, :, :]
    return np.sum(d * d, axis=2)


def distance_loss(
    z: np.ndarray, latent: np.ndarray, lambda_d: float, mode: str = "squared"
) -> float:
    """Isometry penalty over all ordered row pairs of the batch.

    squared mode penalizes (|z_i-z_j|^2 - |l_i-l_j|^2)^2, which is smooth
    everywhere; absolute mode penalizes (|z_i-z_j| - |l_i-l_j|)^2.
    """
    if z.shape[0] != latent.shape[0]:
        raise DataError("z and latent must have equal batch sizes")
    Dz = _pairwise_sq_dists(z)
    Dl = _pairwise_sq_dists(latent)
    if mode == "squared":
        diff = Dz - Dl
    elif mode == "absolute":
        diff = np.sqrt(Dz) - np.sqrt(Dl)
    else:
        raise ConfigError(f"unknown distance mode {mode!r}")
    return float(lambda_d * np.sum(diff * diff))


def total_loss(z, latent, z_hat, config: TrainConfig) -> float:
    return (
        reconstruction_loss(z, z_hat)
        + sparsity_loss(latent, config.lambda_r)
        + distance_loss(z, latent, config.lambda_d, config.distance_mode)
    )


def _distance_loss_grad(z, latent, lambda_d, mode) -> np.ndarray:
    """d distance_loss / d latent.

    For the squared mode each unordered pair appears twice in the ordered
    sum, which doubles the textbook single-count gradient:
    g_k = 8 * lambda_d * sum_j (|l_k-l_j|^2 - |z_k-z_j|^2) (l_k - l_j).
    """
    if lambda_d == 0.0:
        return np.zeros_like(latent)
    Dz = _pairwise_sq_dists(z)
    Dl = _pairwise_sq_dists(latent)
    if mode == "squared":
        coef = Dl - Dz  # symmetric
        g = 8.0 * lambda_d * (coef.sum(axis=1)[:, None] * latent - coef @ latent)
    else:
        dz = np.sqrt(Dz)
        dl = np.sqrt(Dl)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(dl > 0.0, (dl - dz) / dl, 0.0)
        g = 4.0 * lambda_d * (coef.sum(axis=1)[:, None] * latent - coef @ latent)
    return g


def _half_backward(hidden: LayerParams, head: LayerParams, cache, g_out):
    """Backprop through one half; returns (grad wrt half input, tensor grads)."""
    d = cache["d"]
    g_head_w = g_out.T @ d
    g_head_b = g_out.sum(axis=0)
    g_d = g_out @ head.weights

    if cache["mask"] is not None:
        g_y = g_d * cache["mask"]
    else:
        g_y = g_d
    xhat = cache["xhat"]
    g_gamma = np.sum(g_y * xhat, axis=0)
    g_beta = np.sum(g_y, axis=0)
    g_xhat = g_y * hidden.bn_gamma

    inv_std = cache["inv_std"]
    if cache["mode"] == "training":
        # Batch statistics are functions of t; push gradients through them.
        b = xhat.shape[0]
        g_t = (inv_std / b) * (
            b * g_xhat - g_xhat.sum(axis=0) - xhat * np.sum(g_xhat * xhat, axis=0)
        )
    else:
        g_t = g_xhat * inv_std

    t = cache["t"]
    g_a = g_t * (1.0 - t * t)
    x = cache["x"]
    g_hidden_w = g_a.T @ x
    g_hidden_b = g_a.sum(axis=0)
    g_x = g_a @ hidden.weights
    grads = {
        "weights": g_hidden_w, "biases": g_hidden_b,
        "bn_gamma": g_gamma, "bn_beta": g_beta,
        "head.weights": g_head_w, "head.biases": g_head_b,
    }
    return g_x, grads


def _backward_from_cache(
    params: AutoencoderParams, batch: np.ndarray, config: TrainConfig, cache
) -> dict[str, np.ndarray]:
    latent, recon = cache["latent"], cache["recon"]
    g_recon = 2.0 * (recon - batch)
    g_latent_dec, dec_grads = _half_backward(params.dec_hidden, params.dec_out, cache["dec"], g_recon)
    g_latent = (
        g_latent_dec
        + config.lambda_r * np.sign(latent)
        + _distance_loss_grad(batch, latent, config.lambda_d, config.distance_mode)
    )
    _, enc_grads = _half_backward(params.enc_hidden, params.enc_out, cache["enc"], g_latent)
    return {
        "enc_hidden.weights": enc_grads["weights"],
        "enc_hidden.biases": enc_grads["biases"],
        "enc_hidden.bn_gamma": enc_grads["bn_gamma"],
        "enc_hidden.bn_beta": enc_grads["bn_beta"],
        "enc_out.weights": enc_grads["head.weights"],
        "enc_out.biases": enc_grads["head.biases"],
        "dec_hidden.weights": dec_grads["weights"],
        "dec_hidden.biases": dec_grads["biases"],
        "dec_hidden.bn_gamma": dec_grads["bn_gamma"],
        "dec_hidden.bn_beta": dec_grads["bn_beta"],
        "dec_out.weights": dec_grads["head.weights"],
        "dec_out.biases": dec_grads["head.biases"],
    }


def gradients(
    params: AutoencoderParams,
    batch: np.ndarray,
    config: TrainConfig,
    seed: int = 0,
    mode: str = "training",
) -> dict[str, np.ndarray]:
    """Analytic gradient of total_loss for every parameter tensor.

    mode selects the forward semantics the gradient is taken under:
    training differentiates through batch statistics and a fixed dropout
    mask drawn from the seed; inference treats the running batch-norm
    statistics as constants and uses no dropout.
    """
    batch = np.asarray(batch, dtype=float)
    dropout = config.dropout_rate if mode == "training" else 0.0
    _, _, cache = forward(params, batch, mode=mode, seed=seed, dropout_rate=dropout)
    return _backward_from_cache(params, batch, config, cache)


def _update_running_stats(layer: LayerParams, cache, momentum: float) -> None:
    layer.bn_running_mean = momentum * layer.bn_running_mean + (1.0 - momentum) * cache["batch_mean"]
    layer.bn_running_var = momentum * layer.bn_running_var + (1.0 - momentum) * cache["batch_var"]


def train(
    ds: SurveyDataset,
    config: TrainConfig,
    stats: NormalizationStats | None = None,
) -> tuple[AutoencoderParams, TrainReport]:
    """Minibatch Adam over shuffled epochs; deterministic given config.seed.

    The distance weight is divided by the square of each minibatch's size
    so the pairwise sum does not grow with batch size. Passing the
    normalization stats adds a dBm-scale RMSE to the report.
    """
    if not ds.normalized:
        raise DataError("train expects a normalized dataset")
    if ds.n < config.batch_size:
        raise DataError(f"n={ds.n} is smaller than batch_size={config.batch_size}")

    t0 = time.perf_counter()
    Z = ds.Z
    params = init_params(ds.m, config)
    params.train_config = config
    report = TrainReport()

    rng = np.random.default_rng(config.seed)
    adam_m = {k: np.zeros_like(params.get_tensor(k)) for k in PARAM_KEYS}
    adam_v = {k: np.zeros_like(params.get_tensor(k)) for k in PARAM_KEYS}
    step = 0
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps

    for epoch in range(config.epochs):
        perm = rng.permutation(ds.n)
        ep_recon = ep_sparse = ep_dist = 0.0
        for start in range(0, ds.n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            if idx.size < 2:
                continue  # batch norm is undefined on a single row
            batch = Z[idx]
            lam_d_eff = config.lambda_d / float(idx.size) ** 2
            eff = replace(config, lambda_d=lam_d_eff)
            mask_seed = int(rng.integers(0, 2**63 - 1))

            latent, recon, cache = forward(
                params, batch, mode="training", seed=mask_seed,
                dropout_rate=config.dropout_rate,
            )
            ep_recon += reconstruction_loss(batch, recon)
            ep_sparse += sparsity_loss(latent, config.lambda_r)
            ep_dist += distance_loss(batch, latent, lam_d_eff, config.distance_mode)

            grads = _backward_from_cache(params, batch, eff, cache)
            _update_running_stats(params.enc_hidden, cache["enc"], config.bn_momentum)
            _update_running_stats(params.dec_hidden, cache["dec"], config.bn_momentum)

            step += 1
            scale = config.learning_rate * math.sqrt(1.0 - b2**step) / (1.0 - b1**step)
            for key in PARAM_KEYS:
                g = grads[key]
                adam_m[key] = b1 * adam_m[key] + (1.0 - b1) * g
                adam_v[key] = b2 * adam_v[key] + (1.0 - b2) * (g * g)
                tensor = params.get_tensor(key)
                params.set_tensor(
                    key, tensor - scale * adam_m[key] / (np.sqrt(adam_v[key]) + eps)
                )

        total = ep_recon + ep_sparse + ep_dist
        if not math.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite training loss at epoch {epoch + 1} "
                f"(recon={ep_recon:g}, sparsity={ep_sparse:g}, distance={ep_dist:g})"
            )
        report.recon_losses.append(ep_recon)
        report.sparsity_losses.append(ep_sparse)
        report.distance_losses.append(ep_dist)

    report.final_rmse = reconstruction_rmse(params, Z)
    if stats is not None:
        report.final_rmse_dbm = reconstruction_rmse(params, Z, stats)
    report.wall_seconds = time.perf_counter() - t0
    return params, report


def reconstruction_rmse(
    params: AutoencoderParams, Z: np.ndarray, stats: NormalizationStats | None = None
) -> float:
    """Round-trip RMSE over all entries; stats rescale errors to dBm."""
    recon = decode(params, encode(params, Z))
    err = Z - recon
    if stats is not None:
        err = err * stats.per_ap_std
    return float(np.sqrt(np.mean(err * err)))


def encode(params: AutoencoderParams, Z: np.ndarray) -> np.ndarray:
    """Deterministic inference-mode encoding; rows are independent."""
    Z = np.asarray(Z, dtype=float)
    squeeze = Z.ndim == 1
    if squeeze:
        Z = Z[None, :]
    latent, _ = _half_forward(params.enc_hidden, params.enc_out, Z, "inference", 0.0, None)
    return latent[0] if squeeze else latent


def decode(params: AutoencoderParams, L: np.ndarray) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    squeeze = L.ndim == 1
    if squeeze:
        L = L[None, :]
    if L.shape[1] != params.latent_dim:
        raise DataError(f"latent dim mismatch: {L.shape[1]} vs {params.latent_dim}")
    recon, _ = _half_forward(params.dec_hidden, params.dec_out, L, "inference", 0.0, None)
    return recon[0] if squeeze else recon


def _layer_to_dict(layer: LayerParams) -> dict:
    doc = {"weights": layer.weights.tolist(), "biases": layer.biases.tolist()}
    if layer.has_batchnorm:
        doc["bn_gamma"] = layer.bn_gamma.tolist()
        doc["bn_beta"] = layer.bn_beta.tolist()
        doc["bn_running_mean"] = layer.bn_running_mean.tolist()
        doc["bn_running_var"] = layer.bn_running_var.tolist()
    return doc


def _layer_from_dict(doc: dict) -> LayerParams:
    opt = lambda k: np.array(doc[k], dtype=float) if k in doc else None
    return LayerParams(
        weights=np.array(doc["weights"], dtype=float),
        biases=np.array(doc["biases"], dtype=float),
        bn_gamma=opt("bn_gamma"), bn_beta=opt("bn_beta"),
        bn_running_mean=opt("bn_running_mean"), bn_running_var=opt("bn_running_var"),
    )


def params_to_dict(params: AutoencoderParams) -> dict:
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "input_dim": params.input_dim,
        "latent_dim": params.latent_dim,
        "hidden_dims": list(params.hidden_dims),
        "enc_hidden": _layer_to_dict(params.enc_hidden),
        "enc_out": _layer_to_dict(params.enc_out),
        "dec_hidden": _layer_to_dict(params.dec_hidden),
        "dec_out": _layer_to_dict(params.dec_out),
    }
    if params.train_config is not None:
        doc["train_config"] = params.train_config.__dict__.copy()
    return doc


def params_from_dict(doc: dict) -> AutoencoderParams:
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise DataError(
            f"unsupported autoencoder format_version {doc.get('format_version')!r}"
        )
    cfg = TrainConfig(**doc["train_config"]) if "train_config" in doc else None
    return AutoencoderParams(
        enc_hidden=_layer_from_dict(doc["enc_hidden"]),
        enc_out=_layer_from_dict(doc["enc_out"]),
        dec_hidden=_layer_from_dict(doc["dec_hidden"]),
        dec_out=_layer_from_dict(doc["dec_out"]),
        input_dim=int(doc["input_dim"]),
        latent_dim=int(doc["latent_dim"]),
        hidden_dims=tuple(doc["hidden_dims"]),
        train_config=cfg,
    )


def save_model(params: AutoencoderParams, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params_to_dict(params), fh)


def load_model(path) -> AutoencoderParams:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupt model file: {exc}") from None
    return params_from_dict(doc)
