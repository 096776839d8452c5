"""Latent-variable generative classifier.

Generative story: y ~ p(y), z ~ N(0, I), m ~ N(0, I), x ~ N(dec(y, z, m), s^2 I).
Two encoders approximate the posterior, q(m | x, y) and q(z | x, y, m).
Training maximizes a single-sample ELBO; prediction scores every class c by an
importance-sampled estimate of log p(x, y=c) and takes a softmax.

In ``paper_literal`` mode m is pinned to 0 while training and the importance
weight ignores the m terms; ``full_elbo`` treats m as a proper latent.
"""

import copy
import enum
import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from . import diff_net as dn
from .can_ingest import N_CLASSES, CanFrame, ClassLabel
from .diff_net import DenseNet, GaussianParams
from .features import FEATURE_DIM, FeatureConfig, extract_stream

logger = logging.getLogger(__name__)

# sigma^2 = 0.01; with unit variance the reconstruction term is too flat to separate classes
DEC_LOG_VAR = math.log(0.01)


class Mode(str, enum.Enum):
    PAPER_LITERAL = "paper_literal"
    FULL_ELBO = "full_elbo"


@dataclass
class ModelConfig:
    x_dim: int = FEATURE_DIM
    n_classes: int = N_CLASSES
    z_dim: int = 8
    m_dim: int = 4
    enc_hidden: Tuple[int, ...] = (26,) * 10
    dec_hidden: Tuple[int, ...] = (36,) * 10
    dec_log_var: float = DEC_LOG_VAR  # fixed decoder log-variance
    k_samples: int = 16
    mode: Mode = Mode.FULL_ELBO
    aux_weight: float = 1.0  # weight of KL(q(m|x,y) || p(m)) in paper_literal training

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.enc_hidden = tuple(int(h) for h in self.enc_hidden)
        self.dec_hidden = tuple(int(h) for h in self.dec_hidden)
        if self.z_dim < 1 or self.m_dim < 0 or self.k_samples < 1:
            raise ValueError("need z_dim >= 1, m_dim >= 0, k_samples >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["enc_hidden"] = list(self.enc_hidden)
        d["dec_hidden"] = list(self.dec_hidden)
        return d


class GenClassifier:
    def __init__(self, cfg: ModelConfig, enc_m: Optional[DenseNet], enc_z: DenseNet, dec: DenseNet,
                 prior_y: Optional[np.ndarray] = None):
        self.cfg = cfg
        self.enc_m = enc_m
        self.enc_z = enc_z
        self.dec = dec
        self.prior_y = (np.full(cfg.n_classes, 1.0 / cfg.n_classes) if prior_y is None
                        else np.asarray(prior_y, dtype=np.float64))
        self._check()

    def _check(self):
        c = self.cfg
        if (self.enc_m is None) != (c.m_dim == 0):
            raise ValueError("enc_m must exist iff m_dim > 0")
        if self.enc_m is not None and (self.enc_m.input_dim, self.enc_m.output_dim) != (c.x_dim + c.n_classes, 2 * c.m_dim):
            raise ValueError("enc_m has the wrong shape")
        if (self.enc_z.input_dim, self.enc_z.output_dim) != (c.x_dim + c.n_classes + c.m_dim, 2 * c.z_dim):
            raise ValueError("enc_z has the wrong shape")
        if (self.dec.input_dim, self.dec.output_dim) != (c.n_classes + c.z_dim + c.m_dim, c.x_dim):
            raise ValueError("dec has the wrong shape")
        if self.prior_y.shape != (c.n_classes,) or np.any(self.prior_y <= 0) \
                or abs(self.prior_y.sum() - 1.0) > 1e-9:
            raise ValueError("prior_y must be a strictly positive probability vector")

    @classmethod
    def create(cls, cfg: Optional[ModelConfig] = None, seed: int = 0) -> "GenClassifier":
        cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        xy = cfg.x_dim + cfg.n_classes
        enc_m = DenseNet.create(xy, cfg.enc_hidden, 2 * cfg.m_dim, rng) if cfg.m_dim else None
        enc_z = DenseNet.create(xy + cfg.m_dim, cfg.enc_hidden, 2 * cfg.z_dim, rng)
        dec = DenseNet.create(cfg.n_classes + cfg.z_dim + cfg.m_dim, cfg.dec_hidden, cfg.x_dim, rng)
        return cls(cfg, enc_m, enc_z, dec)

    @property
    def prior_z(self) -> GaussianParams:
        return GaussianParams.standard(self.cfg.z_dim)

    @property
    def prior_m(self) -> GaussianParams:
        return GaussianParams.standard(self.cfg.m_dim)

    def nets(self) -> Dict[str, DenseNet]:
        out = {"enc_z": self.enc_z, "dec": self.dec}
        if self.enc_m is not None:
            out["enc_m"] = self.enc_m
        return out

    def params(self) -> Dict[str, np.ndarray]:
        """Flat parameter vector of each network (views; updates are in place)."""
        return {name: net.flat for name, net in sorted(self.nets().items())}

    def named_params(self) -> Dict[str, np.ndarray]:
        named = {}
        for name, net in sorted(self.nets().items()):
            named.update(net.named_params(name))
        return named

    def touch(self):
        for net in self.nets().values():
            net.touch()

    def copy(self) -> "GenClassifier":
        return GenClassifier(copy.deepcopy(self.cfg), self.enc_m.copy() if self.enc_m else None,
                             self.enc_z.copy(), self.dec.copy(), self.prior_y.copy())

    # checkpoint ------------------------------------------------------------------------

    def to_blocks(self) -> Dict[str, np.ndarray]:
        blocks = dict(self.named_params())
        blocks["prior_y"] = self.prior_y
        return blocks

    def metadata(self) -> dict:
        acts = {name: [l.activation for l in net.layers] for name, net in self.nets().items()}
        return {"model": self.cfg.to_dict(), "activations": acts}

    @classmethod
    def from_blocks(cls, blocks: Dict[str, np.ndarray], meta: dict) -> "GenClassifier":
        mc = dict(meta["model"])
        cfg = ModelConfig(**mc)
        nets = {}
        for name, acts in meta["activations"].items():
            layers = [dn.Layer(blocks[f"{name}.{i}.weight"], blocks[f"{name}.{i}.bias"], act)
                      for i, act in enumerate(acts)]
            nets[name] = DenseNet(layers)
        return cls(cfg, nets.get("enc_m"), nets["enc_z"], nets["dec"], blocks["prior_y"])


# --- ELBO -----------------------------------------------------------------------------

@dataclass
class ElboTerms:
    recon_log_lik: np.ndarray
    log_prior_z: np.ndarray
    log_prior_y: np.ndarray
    log_q_z: np.ndarray
    kl_m: np.ndarray
    elbo: np.ndarray


def one_hot(y: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(y), n))
    out[np.arange(len(y)), y] = 1.0
    return out


def _check_finite(terms: ElboTerms):
    for name in ("recon_log_lik", "log_prior_z", "log_prior_y", "log_q_z", "kl_m"):
        if not np.isfinite(getattr(terms, name)).all():
            raise dn.NumericError(f"non-finite ELBO term {name}")


def elbo_batch(model: GenClassifier, X: np.ndarray, Y: np.ndarray, eps_z: np.ndarray,
               eps_m: Optional[np.ndarray] = None, with_grad: bool = False,
               tapes: Optional[dict] = None):
    """Per-sample ELBO terms for a batch, and optionally the gradient of the training loss.

    The training loss is ``mean(-elbo)``, plus ``aux_weight * mean(KL(q(m|x,y) || p(m)))``
    in paper_literal mode. Returns ``(terms, aux_kl, grads)``; grads is ``None`` unless
    requested and otherwise holds one flat vector per network, keyed like ``model.params()``.
    If ``tapes`` is a dict, the forward tapes of each network are stored in it.
    """
    c = model.cfg
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.int64)
    B = len(X)
    yoh = one_hot(Y, c.n_classes)
    full = c.mode == Mode.FULL_ELBO

    q_m = raw_m = tape_m = None
    if model.enc_m is not None:
        raw_m, tape_m = dn.forward(model.enc_m, np.concatenate([X, yoh], axis=1))
        q_m = dn.gaussian_head(raw_m, c.m_dim)
    if full and c.m_dim:
        if eps_m is None or eps_m.shape != (B, c.m_dim):
            raise ValueError("full_elbo mode needs m noise of shape (batch, m_dim)")
        m = dn.sample_reparam(q_m, eps_m)
        kl_m = dn.kl_to_standard_normal(q_m)
    else:
        m = np.zeros((B, c.m_dim))
        kl_m = np.zeros(B)
    aux_kl = (dn.kl_to_standard_normal(q_m) if (not full and q_m is not None) else np.zeros(B))

    raw_z, tape_z = dn.forward(model.enc_z, np.concatenate([X, yoh, m], axis=1))
    q_z = dn.gaussian_head(raw_z, c.z_dim)
    z = dn.sample_reparam(q_z, eps_z)
    xhat, tape_d = dn.forward(model.dec, np.concatenate([yoh, z, m], axis=1))
    p_x = GaussianParams(xhat, np.full(c.x_dim, c.dec_log_var))
    if tapes is not None:
        tapes.update(enc_z=tape_z, dec=tape_d)
        if tape_m is not None:
            tapes["enc_m"] = tape_m

    recon = dn.gaussian_log_pdf(X, p_x)
    lpz = dn.gaussian_log_pdf(z, model.prior_z)
    lqz = dn.gaussian_log_pdf(z, q_z)
    lpy = np.log(model.prior_y[Y])
    terms = ElboTerms(recon, lpz, lpy, lqz, kl_m, recon + lpz + lpy - lqz - kl_m)
    _check_finite(terms)
    if not with_grad:
        return terms, aux_kl, None

    w = 1.0 / B
    grads: Dict[str, np.ndarray] = {}
    # decoder: d(-recon)/d xhat
    _, d_xhat, _ = dn.gaussian_log_pdf_grads(X, p_x)
    g_dec, d_in_d = dn.backward(model.dec, tape_d, -w * d_xhat)
    grads["dec"] = model.dec.flatten_grads(g_dec)
    nz = c.n_classes + c.z_dim
    d_z = d_in_d[:, c.n_classes:nz]
    d_m = d_in_d[:, nz:]
    # prior and posterior density terms; -lpz contributes +z, +lqz contributes its partials
    dqz_dz, dqz_dmu, dqz_dlv = dn.gaussian_log_pdf_grads(z, q_z)
    d_z = d_z + w * z + w * dqz_dz
    d_mu_z, d_lv_z = dn.reparam_backward(q_z, eps_z, d_z)
    d_mu_z = d_mu_z + w * dqz_dmu
    d_lv_z = d_lv_z + w * dqz_dlv
    g_ez, d_in_z = dn.backward(model.enc_z, tape_z,
                               dn.gaussian_head_backward(raw_z, d_mu_z, d_lv_z))
    grads["enc_z"] = model.enc_z.flatten_grads(g_ez)

    if model.enc_m is not None:
        dkl_mu, dkl_lv = dn.kl_to_standard_normal_grads(q_m)
        if full:
            d_m = d_m + d_in_z[:, c.x_dim + c.n_classes:]
            d_mu_m, d_lv_m = dn.reparam_backward(q_m, eps_m, d_m)
            d_mu_m = d_mu_m + w * dkl_mu
            d_lv_m = d_lv_m + w * dkl_lv
        else:
            a = w * c.aux_weight
            d_mu_m, d_lv_m = a * dkl_mu, a * dkl_lv
        g_em, _ = dn.backward(model.enc_m, tape_m, dn.gaussian_head_backward(raw_m, d_mu_m, d_lv_m))
        grads["enc_m"] = model.enc_m.flatten_grads(g_em)
    return terms, aux_kl, grads


def training_loss(terms: ElboTerms, aux_kl: np.ndarray, cfg: ModelConfig) -> float:
    loss = -float(np.mean(terms.elbo))
    if cfg.mode == Mode.PAPER_LITERAL:
        loss += cfg.aux_weight * float(np.mean(aux_kl))
    return loss


def elbo_sample(model: GenClassifier, x: np.ndarray, y: int, noise_z: np.ndarray,
                noise_m: Optional[np.ndarray] = None) -> ElboTerms:
    """Single-sample ELBO for one (x, y) pair; fields are scalars."""
    terms, _, _ = elbo_batch(model, np.asarray(x)[None, :], np.array([int(y)]),
                             np.asarray(noise_z, dtype=np.float64)[None, :],
                             None if noise_m is None else np.asarray(noise_m, dtype=np.float64)[None, :])
    return ElboTerms(**{k: float(v[0]) for k, v in terms.__dict__.items()})


# --- prediction -----------------------------------------------------------------------

PREDICT_CHUNK = 512


def log_importance_weights(model: GenClassifier, X: np.ndarray, rng: np.random.Generator,
                           k: Optional[int] = None) -> np.ndarray:
    """log w of shape (n, C, K): one row of K samples per input and candidate class."""
    c = model.cfg
    k = k or c.k_samples
    X = np.asarray(X, dtype=np.float64)
    n, C = len(X), c.n_classes
    rows = n * C * k
    Xr = np.repeat(X, C * k, axis=0)
    yr = np.tile(np.repeat(np.arange(C), k), n)
    yoh = one_hot(yr, C)
    full = c.mode == Mode.FULL_ELBO
    if c.m_dim:
        raw_m, _ = dn.forward(model.enc_m, np.concatenate([Xr, yoh], axis=1))
        q_m = dn.gaussian_head(raw_m, c.m_dim)
        eps_m = rng.standard_normal((rows, c.m_dim))
        m = dn.sample_reparam(q_m, eps_m)
    else:
        m = np.zeros((rows, 0))
    raw_z, _ = dn.forward(model.enc_z, np.concatenate([Xr, yoh, m], axis=1))
    q_z = dn.gaussian_head(raw_z, c.z_dim)
    eps_z = rng.standard_normal((rows, c.z_dim))
    z = dn.sample_reparam(q_z, eps_z)
    xhat, _ = dn.forward(model.dec, np.concatenate([yoh, z, m], axis=1))
    log_w = (dn.gaussian_log_pdf(Xr, GaussianParams(xhat, np.full(c.x_dim, c.dec_log_var)))
             + dn.gaussian_log_pdf(z, model.prior_z)
             + np.log(model.prior_y[yr])
             - dn.gaussian_log_pdf(z, q_z))
    if full and c.m_dim:
        log_w += dn.gaussian_log_pdf(m, model.prior_m) - dn.gaussian_log_pdf(m, q_m)
    return log_w.reshape(n, C, k)


def predict_scores(model: GenClassifier, X: np.ndarray, seed: int = 0,
                   k: Optional[int] = None) -> np.ndarray:
    """Importance-sampled log p(x, y=c) for every row of X and class c, shape (n, C)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    k = k or model.cfg.k_samples
    rng = np.random.default_rng(seed)
    chunk = max(1, PREDICT_CHUNK * 16 // k)
    out = np.empty((len(X), model.cfg.n_classes))
    for s in range(0, len(X), chunk):
        lw = log_importance_weights(model, X[s:s + chunk], rng, k)
        out[s:s + chunk] = logsumexp(lw, axis=2) - math.log(k)
    return out


def scores_to_proba(scores: np.ndarray) -> np.ndarray:
    scores = np.atleast_2d(scores)
    if np.any(np.all(np.isneginf(scores), axis=1)):
        raise dn.NumericError("degenerate likelihood")
    return softmax(scores, axis=1)


def predict_proba(model: GenClassifier, X: np.ndarray, seed: int = 0) -> np.ndarray:
    return scores_to_proba(predict_scores(model, X, seed))


def predict(model: GenClassifier, x: np.ndarray, seed: int = 0) -> np.ndarray:
    """Class probability vector for a single feature vector."""
    return predict_proba(model, np.asarray(x)[None, :], seed)[0]


def decide(proba: np.ndarray) -> np.ndarray:
    # np.argmax picks the first maximum, i.e. ties go to Normal (index 0)
    return np.argmax(proba, axis=-1)


def classify_log(model: GenClassifier, frames: Sequence[CanFrame], cfg: FeatureConfig = FeatureConfig(),
                 seed: int = 0) -> List[Tuple[ClassLabel, np.ndarray]]:
    X, _ = extract_stream(frames, cfg)
    if len(X) == 0:
        return []
    proba = predict_proba(model, X, seed)
    return [(ClassLabel(int(c)), p) for c, p in zip(decide(proba), proba)]


# --- training ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 100
    iterations: int = 250
    iteration_unit: str = "epoch"  # "epoch" (passes over data) or "batch"
    lr: float = 1e-4
    seed: int = 0
    eval_every: int = 5  # in iteration units
    eval_samples: int = 1000

    def __post_init__(self):
        if self.iteration_unit not in ("epoch", "batch"):
            raise ValueError("iteration_unit must be 'epoch' or 'batch'")
        if self.batch_size < 1 or self.iterations < 0 or self.eval_every < 1:
            raise ValueError("batch_size >= 1, iterations >= 0 and eval_every >= 1 required")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TracePoint:
    step: int
    neg_elbo: float
    train_accuracy: float


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_good: GenClassifier, trace: List[TracePoint]):
        super().__init__(msg)
        self.last_good = last_good
        self.trace = trace


def empirical_prior(Y: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    counts = np.bincount(np.asarray(Y, dtype=np.int64), minlength=n_classes).astype(np.float64)
    if np.any(counts == 0):
        logger.warning("classes %s absent from training data; adding one pseudo-count each",
                       np.flatnonzero(counts == 0).tolist())
        counts += 1.0
    return counts / counts.sum()


def train(model: GenClassifier, X: np.ndarray, Y: np.ndarray, cfg: TrainConfig = TrainConfig(),
          adam: Optional[dn.AdamState] = None, progress=None):
    """Adam ascent on the mean ELBO. Mutates and returns ``(model, trace, adam_state)``."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("no training data")
    mc = model.cfg
    model.prior_y = empirical_prior(Y, mc.n_classes)
    adam = adam or dn.AdamState(lr=cfg.lr)
    params = model.params()
    rng = np.random.default_rng(cfg.seed)
    n = len(X)
    eval_idx = rng.choice(n, size=min(cfg.eval_samples, n), replace=False)
    batches_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.iterations * (batches_per_epoch if cfg.iteration_unit == "epoch" else 1)
    eval_period = cfg.eval_every * (batches_per_epoch if cfg.iteration_unit == "epoch" else 1)
    trace: List[TracePoint] = []
    last_good = model.copy()
    running, running_n = 0.0, 0
    perm, pos = rng.permutation(n), 0
    for step in range(1, total + 1):
        if pos >= n:
            perm, pos = rng.permutation(n), 0
        idx = perm[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        eps_z = rng.standard_normal((len(idx), mc.z_dim))
        eps_m = rng.standard_normal((len(idx), mc.m_dim))
        try:
            terms, aux, grads = elbo_batch(model, X[idx], Y[idx], eps_z, eps_m, with_grad=True)
            loss = training_loss(terms, aux, mc)
            if not math.isfinite(loss):
                raise dn.NumericError("non-finite loss")
            dn.adam_step(params, grads, adam)
        except dn.NumericError as exc:
            raise TrainingDiverged(f"training diverged at step {step}: {exc}", last_good, trace) from exc
        model.touch()
        running += loss
        running_n += 1
        if step % eval_period == 0 or step == total:
            pred = decide(predict_proba(model, X[eval_idx], seed=cfg.seed + step))
            acc = float(np.mean(pred == Y[eval_idx]))
            trace.append(TracePoint(step, running / running_n, acc))
            running, running_n = 0.0, 0
            last_good = model.copy()
            if progress is not None:
                progress(trace[-1])
    return model, trace, adam
