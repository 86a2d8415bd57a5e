"""Stacked sparse autoencoder with softmax head, trained from scratch.

Greedy layerwise pretraining minimizes reconstruction + L2 + KL-sparsity
(tanh activations rescaled to (0,1) before averaging); fine-tuning
minimizes cross-entropy + L2 over the whole stack. Both use momentum SGD
(v <- mu*v - lr*grad; w <- w + v) with a stepped learning-rate schedule:
effective lr at 0-based epoch e is lr * drop_factor**(e // drop_period).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import binio
from .errors import ConfigError, NumericError

SSAE_MAGIC = "SSA1"

_RHO_CLAMP = 1e-6
INIT_SCALE = 0.1  # uniform [-0.1, 0.1] initial weights


@dataclass
class TrainConfig:
    max_epochs: int = 500
    lr: float = 1e-4
    momentum: float = 0.6
    lr_drop_period: int = 5
    lr_drop_factor: float = 0.9
    l2_pretrain: float = 0.001
    l2_finetune: float = 1e-4
    sparsity_weight: float = 4.0
    sparsity_target: float = 0.15
    batch_size: int = 32
    seed: int = 0
    early_stop_patience: int = 20
    gradient_decay: float | None = None  # optional EMA on gradients, off by default

    def validate(self) -> None:
        if not (0.0 < self.sparsity_target < 1.0):
            raise ConfigError("sparsity_target must be in (0, 1)")
        for name in ("max_epochs", "lr", "lr_drop_period", "lr_drop_factor",
                     "batch_size", "early_stop_patience"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_drop_factor ** (epoch // self.lr_drop_period)


@dataclass
class DenseLayer:
    w: np.ndarray  # out x in
    b: np.ndarray  # out

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.w.copy(), self.b.copy())


@dataclass
class SsaeModel:
    enc1: DenseLayer
    enc2: DenseLayer
    softmax_w: np.ndarray  # C x h2
    softmax_b: np.ndarray  # C
    class_order: tuple[str, ...]

    def copy(self) -> "SsaeModel":
        return SsaeModel(self.enc1.copy(), self.enc2.copy(),
                         self.softmax_w.copy(), self.softmax_b.copy(),
                         self.class_order)

    def params(self) -> list[np.ndarray]:
        return [self.enc1.w, self.enc1.b, self.enc2.w, self.enc2.b,
                self.softmax_w, self.softmax_b]


def init_layer(n_out: int, n_in: int, rng: np.random.Generator) -> DenseLayer:
    w = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(n_out, n_in))
    b = rng.uniform(-INIT_SCALE, INIT_SCALE, size=n_out)
    return DenseLayer(w, b)


def encode(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """tanh(W x + b), rows of x are samples (a single vector also works)."""
    return np.tanh(np.asarray(x, dtype=np.float64) @ layer.w.T + layer.b)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(model: SsaeModel, x: np.ndarray) -> np.ndarray:
    """Class probability vector(s) for one fused vector or a batch of rows."""
    h2 = encode(model.enc2, encode(model.enc1, x))
    return softmax(h2 @ model.softmax_w.T + model.softmax_b)


class _MomentumOptimizer:
    """v <- mu*v - lr*g; p <- p + v, with optional gradient EMA (D24-style)."""

    def __init__(self, params: list[np.ndarray], momentum: float,
                 gradient_decay: float | None):
        self.params = params
        self.momentum = momentum
        self.gradient_decay = gradient_decay
        self.velocity = [np.zeros_like(p) for p in params]
        self.ema = None
        if gradient_decay is not None:
            self.ema = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        for i, g in enumerate(grads):
            if self.ema is not None:
                self.ema[i] = (self.gradient_decay * self.ema[i]
                               + (1.0 - self.gradient_decay) * g)
                g = self.ema[i]
            self.velocity[i] = self.momentum * self.velocity[i] - lr * g
            self.params[i] += self.velocity[i]


def ae_loss_and_grads(enc: DenseLayer, dec: DenseLayer, x: np.ndarray,
                      cfg: TrainConfig) -> tuple[float, list[np.ndarray]]:
    """Sparse-AE objective on one batch and gradients in param order
    [enc.w, enc.b, dec.w, dec.b]."""
    m = x.shape[0]
    h = np.tanh(x @ enc.w.T + enc.b)
    xhat = h @ dec.w.T + dec.b

    resid = xhat - x
    recon = (resid ** 2).sum() / m
    l2 = cfg.l2_pretrain * ((enc.w ** 2).sum() + (dec.w ** 2).sum())

    rho = cfg.sparsity_target
    rho_raw = ((h + 1.0) / 2.0).mean(axis=0)
    rho_hat = np.clip(rho_raw, _RHO_CLAMP, 1.0 - _RHO_CLAMP)
    kl = (rho * np.log(rho / rho_hat)
          + (1.0 - rho) * np.log((1.0 - rho) / (1.0 - rho_hat))).sum()
    loss = recon + l2 + cfg.sparsity_weight * kl

    dxhat = 2.0 * resid / m
    g_dec_w = dxhat.T @ h + 2.0 * cfg.l2_pretrain * dec.w
    g_dec_b = dxhat.sum(axis=0)

    dh = dxhat @ dec.w
    # KL path: d rho_hat / dh_ij = 1/(2m); zero where the clamp is active.
    unclamped = (rho_raw > _RHO_CLAMP) & (rho_raw < 1.0 - _RHO_CLAMP)
    dkl = np.where(
        unclamped,
        cfg.sparsity_weight * (-rho / rho_hat + (1.0 - rho) / (1.0 - rho_hat)),
        0.0,
    )
    dh = dh + dkl[None, :] / (2.0 * m)
    dz = dh * (1.0 - h ** 2)
    g_enc_w = dz.T @ x + 2.0 * cfg.l2_pretrain * enc.w
    g_enc_b = dz.sum(axis=0)
    return float(loss), [g_enc_w, g_enc_b, g_dec_w, g_dec_b]


def train_sparse_ae(x: np.ndarray, hidden: int, cfg: TrainConfig,
                    *, return_history: bool = False):
    """Train one sparse autoencoder; returns (encoder, decoder).

    Stops at max_epochs or when the epoch training loss has not improved
    for early_stop_patience epochs.
    """
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n < cfg.batch_size:
        raise ConfigError(f"need at least batch_size={cfg.batch_size} samples")
    rng = np.random.default_rng(cfg.seed)
    enc = init_layer(hidden, d, rng)
    dec = init_layer(d, hidden, rng)
    opt = _MomentumOptimizer([enc.w, enc.b, dec.w, dec.b],
                             cfg.momentum, cfg.gradient_decay)
    history = []
    best = np.inf
    stall = 0
    for epoch in range(cfg.max_epochs):
        lr = cfg.lr_at(epoch)
        perm = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            loss, grads = ae_loss_and_grads(enc, dec, x[idx], cfg)
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite pretraining loss at epoch {epoch} (lr too high?)"
                )
            opt.step(grads, lr)
            loss_sum += loss * idx.size
        epoch_loss = loss_sum / n
        history.append({"epoch": epoch, "train_loss": epoch_loss, "lr": lr})
        if epoch_loss < best - 1e-9 * max(abs(best), 1e-12):
            best = epoch_loss
            stall = 0
        else:
            stall += 1
        if stall >= cfg.early_stop_patience:
            break
    if return_history:
        return enc, dec, history
    return enc, dec


def init_stack(enc1: DenseLayer, enc2: DenseLayer, class_order: Sequence[str],
               seed: int) -> SsaeModel:
    """Attach a randomly initialized softmax head to pretrained encoders."""
    rng = np.random.default_rng(seed)
    head = init_layer(len(class_order), enc2.w.shape[0], rng)
    return SsaeModel(enc1=enc1.copy(), enc2=enc2.copy(),
                     softmax_w=head.w, softmax_b=head.b,
                     class_order=tuple(class_order))


def stack_loss_and_grads(model: SsaeModel, x: np.ndarray, y: np.ndarray,
                         l2: float) -> tuple[float, list[np.ndarray]]:
    """Cross-entropy + L2 on a batch; gradients match model.params() order."""
    m = x.shape[0]
    h1 = np.tanh(x @ model.enc1.w.T + model.enc1.b)
    h2 = np.tanh(h1 @ model.enc2.w.T + model.enc2.b)
    logits = h2 @ model.softmax_w.T + model.softmax_b
    probs = softmax(logits)

    picked = probs[np.arange(m), y]
    ce = -np.log(np.maximum(picked, 1e-300)).mean()
    l2_term = l2 * ((model.enc1.w ** 2).sum() + (model.enc2.w ** 2).sum()
                    + (model.softmax_w ** 2).sum())
    loss = ce + l2_term

    dlogits = probs.copy()
    dlogits[np.arange(m), y] -= 1.0
    dlogits /= m
    g_sw = dlogits.T @ h2 + 2.0 * l2 * model.softmax_w
    g_sb = dlogits.sum(axis=0)
    dh2 = dlogits @ model.softmax_w
    dz2 = dh2 * (1.0 - h2 ** 2)
    g_w2 = dz2.T @ h1 + 2.0 * l2 * model.enc2.w
    g_b2 = dz2.sum(axis=0)
    dh1 = dz2 @ model.enc2.w
    dz1 = dh1 * (1.0 - h1 ** 2)
    g_w1 = dz1.T @ x + 2.0 * l2 * model.enc1.w
    g_b1 = dz1.sum(axis=0)
    return float(loss), [g_w1, g_b1, g_w2, g_b2, g_sw, g_sb]


def accuracy(model: SsaeModel, x: np.ndarray, y: np.ndarray) -> float:
    return float((predict(model, x).argmax(axis=1) == y).mean())


def fine_tune(model: SsaeModel, train_x: np.ndarray, train_y: np.ndarray,
              val_x: np.ndarray | None, val_y: np.ndarray | None,
              cfg: TrainConfig) -> tuple[SsaeModel, list[dict]]:
    """End-to-end training of the stack; returns (best model, history).

    Model selection tracks validation accuracy per epoch (training loss
    when the validation set is empty) and keeps the best epoch's params.
    """
    cfg.validate()
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    n = train_x.shape[0]
    has_val = val_x is not None and len(val_x) > 0
    if not has_val:
        warnings.warn("empty validation set; selecting on training loss")
    else:
        val_x = np.asarray(val_x, dtype=np.float64)
        val_y = np.asarray(val_y, dtype=np.int64)

    work = model.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = _MomentumOptimizer(work.params(), cfg.momentum, cfg.gradient_decay)
    history: list[dict] = []
    best_model = work.copy()
    best_key = -np.inf
    stall = 0
    for epoch in range(cfg.max_epochs):
        lr = cfg.lr_at(epoch)
        perm = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            loss, grads = stack_loss_and_grads(work, train_x[idx],
                                               train_y[idx], cfg.l2_finetune)
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite fine-tuning loss at epoch {epoch} (lr too high?)"
                )
            opt.step(grads, lr)
            loss_sum += loss * idx.size
        epoch_loss = loss_sum / n
        train_acc = accuracy(work, train_x, train_y)
        val_acc = accuracy(work, val_x, val_y) if has_val else None
        history.append({
            "epoch": epoch, "train_loss": epoch_loss,
            "train_acc": train_acc, "val_acc": val_acc, "lr": lr,
        })
        key = val_acc if has_val else -epoch_loss
        if key > best_key + 1e-12:
            best_key = key
            best_model = work.copy()
            stall = 0
        else:
            stall += 1
        if stall >= cfg.early_stop_patience:
            break
    return best_model, history


# --- gradient verification --------------------------------------------------

LossGradFn = Callable[[], tuple[float, list[np.ndarray]]]


def max_relative_gradient_error(loss_and_grad: LossGradFn,
                                params: list[np.ndarray],
                                epsilon: float) -> float:
    """Compare analytic gradients against central differences.

    loss_and_grad must evaluate the objective at the current params (which
    are perturbed in place and restored). Returns
    max |analytic - cd| / max(|analytic|, |cd|, 1e-12).
    """
    _, analytic = loss_and_grad()
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi, _ = loss_and_grad()
            flat[i] = orig - epsilon
            lo, _ = loss_and_grad()
            flat[i] = orig
            cd = (hi - lo) / (2.0 * epsilon)
            denom = max(abs(gflat[i]), abs(cd), 1e-12)
            worst = max(worst, abs(gflat[i] - cd) / denom)
    return worst


def gradient_check(model: SsaeModel, x: np.ndarray, y: np.ndarray,
                   cfg: TrainConfig, epsilon: float = 1e-5) -> float:
    """Fine-tuning loss gradient vs central differences (small models)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    params = model.params()
    return max_relative_gradient_error(
        lambda: stack_loss_and_grads(model, x, y, cfg.l2_finetune),
        params, epsilon,
    )


def gradient_check_pretrain(enc: DenseLayer, dec: DenseLayer, x: np.ndarray,
                            cfg: TrainConfig, epsilon: float = 1e-5) -> float:
    """Pretraining loss gradient vs central differences (small models)."""
    x = np.asarray(x, dtype=np.float64)
    params = [enc.w, enc.b, dec.w, dec.b]
    return max_relative_gradient_error(
        lambda: ae_loss_and_grads(enc, dec, x, cfg),
        params, epsilon,
    )


# --- SSA1 model file and history CSV ----------------------------------------

def write_ssae_model(path: str | Path, model: SsaeModel) -> None:
    with open(path, "wb") as f:
        binio.write_magic(f, SSAE_MAGIC)
        binio.write_u32(f, model.enc1.w.shape[1])
        binio.write_u32(f, model.enc1.w.shape[0])
        binio.write_u32(f, model.enc2.w.shape[0])
        binio.write_u32(f, len(model.class_order))
        for arr in model.params():
            binio.write_f64_array(f, arr)
        for tag in model.class_order:
            binio.write_str(f, tag)


def read_ssae_model(path: str | Path) -> SsaeModel:
    with open(path, "rb") as f:
        binio.read_magic(f, SSAE_MAGIC)
        _in_dim = binio.read_u32(f)
        _h1 = binio.read_u32(f)
        _h2 = binio.read_u32(f)
        n_classes = binio.read_u32(f)
        w1 = binio.read_f64_array(f)
        b1 = binio.read_f64_array(f)
        w2 = binio.read_f64_array(f)
        b2 = binio.read_f64_array(f)
        sw = binio.read_f64_array(f)
        sb = binio.read_f64_array(f)
        class_order = tuple(binio.read_str(f) for _ in range(n_classes))
    return SsaeModel(DenseLayer(w1, b1), DenseLayer(w2, b2), sw, sb, class_order)


def write_history_csv(path: str | Path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "train_acc", "val_acc", "lr"])
        for row in history:
            val = row.get("val_acc")
            writer.writerow([
                row["epoch"],
                repr(float(row["train_loss"])),
                repr(float(row["train_acc"])) if "train_acc" in row else "NA",
                repr(float(val)) if val is not None else "NA",
                repr(float(row["lr"])),
            ])
