"""Stage 1: domain-invariant representation learning.

A shared encoder maps expression from either domain into a latent space. Each
sample's representation ``Z`` is a softmax-attention mixture of a learned
per-drug codebook, with attention given by cosine similarity between the
shared encoding and each codebook row. Per-domain private encoders capture
what ``Z`` should not, and a shared decoder reconstructs expression from
``Z`` concatenated with the private code. A Wasserstein critic with gradient
penalty pushes the two domains' concatenated codes together.
"""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .nn import init_mlp, mlp_forward

log = logging.getLogger(__name__)

GROUPS = ("shared", "private_cell", "private_patient", "decoder", "codebook", "critic")
GENERATOR_GROUPS = ("shared", "private_cell", "private_patient", "decoder", "codebook")


@dataclass
class TrainConfig:
    pretrain_epochs: int = 50
    adv_epochs: int = 100
    critic_steps: int = 5
    batch_size: int = 64
    inv_temp: float = 10.0
    margin: float = 0.2
    gp_weight: float = 10.0
    lr_pretrain: float = 1e-3
    lr_adv: float = 1e-4
    adv_betas: tuple = (0.5, 0.9)
    encoder_hidden: int = 512
    latent_dim: int = 256
    decoder_hidden: tuple = (256, 512)
    critic_hidden: tuple = (64, 32)
    use_cns: bool = True
    use_embed: bool = True
    seed: int = 0

    def validate(self):
        for name in ("critic_steps", "batch_size", "encoder_hidden", "latent_dim"):
            if getattr(self, name) < 1:
                raise ConfigError("must be positive", key=f"train.{name}")
        for name in ("pretrain_epochs", "adv_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", key=f"train.{name}")
        for name in ("inv_temp", "margin", "gp_weight"):
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", key=f"train.{name}")
        for name in ("lr_pretrain", "lr_adv"):
            if getattr(self, name) <= 0:
                raise ConfigError("must be positive", key=f"train.{name}")
        if not all(0 <= b < 1 for b in self.adv_betas):
            raise ConfigError("moment decays must lie in [0, 1)", key="train.adv_betas")
        return self


@dataclass
class Embeddings:
    Z: np.ndarray
    W: np.ndarray
    C_S_out: np.ndarray


class WiserModel:
    """All learnable Stage-1 parameters, held as named leaf tensors."""

    def __init__(self, n_genes: int, n_drugs: int, cfg: TrainConfig, seed=None):
        self.n_genes = int(n_genes)
        self.n_drugs = int(n_drugs)
        self.inv_temp = float(cfg.inv_temp)
        self.enc_sizes = (self.n_genes, int(cfg.encoder_hidden), int(cfg.latent_dim))
        self.dec_sizes = (2 * int(cfg.latent_dim), *map(int, cfg.decoder_hidden), self.n_genes)
        self.critic_sizes = (2 * int(cfg.latent_dim), *map(int, cfg.critic_hidden), 1)
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        p = OrderedDict()
        p.update(init_mlp(rng, self.enc_sizes, "shared"))
        p.update(init_mlp(rng, self.enc_sizes, "private_cell"))
        p.update(init_mlp(rng, self.enc_sizes, "private_patient"))
        p.update(init_mlp(rng, self.dec_sizes, "decoder"))
        d = self.enc_sizes[-1]
        p["codebook"] = gc.parameter(rng.normal(size=(self.n_drugs, d)) / np.sqrt(d), name="codebook")
        p.update(init_mlp(rng, self.critic_sizes, "critic"))
        self.params = p

    @property
    def latent_dim(self):
        return self.enc_sizes[-1]

    @property
    def codebook(self):
        return self.params["codebook"]

    def group(self, name) -> list:
        if name == "codebook":
            return [self.params["codebook"]]
        return [v for k, v in self.params.items() if k.startswith(name + ".")]

    def groups(self, names) -> list:
        return [t for n in names for t in self.group(n)]

    # -- forward pieces ---------------------------------------------------
    def _check(self, x):
        x = gc.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.n_genes:
            raise ShapeError(f"expected {self.n_genes} genes, got input of shape {x.shape}")
        return x

    def shared(self, x):
        return mlp_forward(self.params, "shared", self._check(x), len(self.enc_sizes) - 1)

    def private(self, x, domain: str):
        prefix = {"cell": "private_cell", "patient": "private_patient"}[domain]
        return mlp_forward(self.params, prefix, self._check(x), len(self.enc_sizes) - 1)

    def decode(self, h):
        return mlp_forward(self.params, "decoder", h, len(self.dec_sizes) - 1)

    def critic(self, h):
        return mlp_forward(self.params, "critic", h, len(self.critic_sizes) - 1)

    def represent(self, x):
        """(Z, W, C_S(x)) for a batch."""
        cs = self.shared(x)
        w = attention_weights(cs, self.codebook, self.inv_temp)
        return weighted_repr(w, self.codebook), w, cs

    def codebook_repr(self, cs):
        """Z rebuilt from a detached C_S, so gradients reach only the codebook."""
        cs = gc.stop_gradient(cs)
        return weighted_repr(attention_weights(cs, self.codebook, self.inv_temp), self.codebook)

    def concat_repr(self, x, domain):
        z, _, _ = self.represent(x)
        return gc.concat_cols(z, self.private(x, domain))

    # -- persistence --------------------------------------------------------
    def state_dict(self) -> OrderedDict:
        out = OrderedDict((k, v.data.copy()) for k, v in self.params.items())
        out["meta.inv_temp"] = np.array(self.inv_temp)
        out["meta.decoder_sizes"] = np.array(self.dec_sizes, dtype=np.float64)
        out["meta.critic_sizes"] = np.array(self.critic_sizes, dtype=np.float64)
        return out

    @classmethod
    def from_state_dict(cls, state) -> "WiserModel":
        enc_w0 = state["shared.0.weight"]
        dec = tuple(int(v) for v in state["meta.decoder_sizes"])
        crit = tuple(int(v) for v in state["meta.critic_sizes"])
        cfg = TrainConfig(
            inv_temp=float(np.reshape(state["meta.inv_temp"], -1)[0]),
            encoder_hidden=enc_w0.shape[1],
            latent_dim=state["shared.1.weight"].shape[1],
            decoder_hidden=dec[1:-1],
            critic_hidden=crit[1:-1],
        )
        model = cls(enc_w0.shape[0], state["codebook"].shape[0], cfg, seed=0)
        for k in model.params:
            model.params[k].data = np.array(state[k], dtype=np.float64)
        return model


# -- representation ---------------------------------------------------------

def attention_weights(cs, codebook, inv_temp):
    """Row-wise softmax of inverse-temperature-scaled cosine similarities."""
    sim = gc.cosine_sim_rows(cs, codebook)
    return gc.softmax_rows(gc.scalar_mul(sim, inv_temp))


def weighted_repr(w, codebook):
    return gc.matmul(w, codebook)


# -- losses -----------------------------------------------------------------

def _sq_rows(a):
    return gc.tsum(a * a, axis=1)


def recon_loss(batch_cell, batch_patient, model: WiserModel):
    total = None
    for x, dom in ((batch_cell, "cell"), (batch_patient, "patient")):
        x = gc.as_tensor(x)
        h = model.concat_repr(x, dom)
        term = gc.mean(_sq_rows(model.decode(h) - x))
        total = term if total is None else total + term
    return total


def ortho_loss(z_c, p_c, z_t, p_t):
    """||Z^T C_P||_F^2 per domain, divided by that domain's batch size."""
    total = None
    for z, p in ((z_c, p_c), (z_t, p_t)):
        z, p = gc.as_tensor(z), gc.as_tensor(p)
        if z.shape[0] != p.shape[0]:
            raise ShapeError(f"ortho_loss: row mismatch {z.shape} vs {p.shape}")
        term = gc.scalar_mul(gc.l2_norm_sq(gc.matmul(gc.transpose(z), p)), 1.0 / z.shape[0])
        total = term if total is None else total + term
    return total


def embed_loss(z, cs, first=True, second=True):
    """Batch mean of ||Z - sg(C_S)||^2 + ||sg(Z) - C_S||^2 for one domain.

    ``first``/``second`` switch the two terms off individually.
    """
    z, cs = gc.as_tensor(z), gc.as_tensor(cs)
    if z.shape != cs.shape:
        raise ShapeError(f"embed_loss: shape mismatch {z.shape} vs {cs.shape}")
    terms = []
    if first:
        terms.append(gc.mean(_sq_rows(z - gc.stop_gradient(cs))))
    if second:
        terms.append(gc.mean(_sq_rows(gc.stop_gradient(z) - cs)))
    if not terms:
        return gc.Tensor(0.0)
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def triplet_loss(cs_cell, labels, codebook, margin):
    """Hinge on mean cosine distance of responders vs non-responders to drug anchors.

    ``labels`` is batch x n_drugs in {-1, 0, 1}; -1 pairs are ignored. A batch
    lacking either responder or non-responder pairs yields 0.
    """
    labels = np.asarray(labels)
    pos = (labels == 1).astype(np.float64)
    negm = (labels == 0).astype(np.float64)
    if pos.sum() == 0 or negm.sum() == 0:
        return gc.Tensor(0.0)
    dis = gc.sub(1.0, gc.cosine_sim_rows(cs_cell, codebook))
    s_pos = gc.scalar_mul(gc.tsum(dis * gc.Tensor(pos)), 1.0 / pos.sum())
    s_neg = gc.scalar_mul(gc.tsum(dis * gc.Tensor(negm)), 1.0 / negm.sum())
    return gc.relu(s_pos - s_neg + margin)


def pl_loss(model: WiserModel, x_c, y_c, x_t, cfg: TrainConfig, parts=None):
    """recon + cns + embed + ortho, sharing one forward pass per domain."""
    x_c, x_t = gc.as_tensor(x_c), gc.as_tensor(x_t)
    z_c, _, cs_c = model.represent(x_c)
    z_t, _, cs_t = model.represent(x_t)
    p_c = model.private(x_c, "cell")
    p_t = model.private(x_t, "patient")
    recon = (gc.mean(_sq_rows(model.decode(gc.concat_cols(z_c, p_c)) - x_c))
             + gc.mean(_sq_rows(model.decode(gc.concat_cols(z_t, p_t)) - x_t)))
    ortho = ortho_loss(z_c, p_c, z_t, p_t)
    total = recon + ortho
    embed = cns = None
    if cfg.use_embed:
        # the first embed term must not reach the encoder through W
        embed = (embed_loss(model.codebook_repr(cs_c), cs_c)
                 + embed_loss(model.codebook_repr(cs_t), cs_t))
        total = total + embed
    if cfg.use_cns:
        cns = triplet_loss(cs_c, y_c, model.codebook, cfg.margin)
        total = total + cns
    if parts is not None:
        parts.update(recon=recon.item(), ortho=ortho.item(),
                     embed=embed.item() if embed is not None else 0.0,
                     cns=cns.item() if cns is not None else 0.0)
    return total


def critic_loss(batch_cell, batch_patient, model: WiserModel, gp_weight, eps=None, rng=None):
    """Critic objective: mean F(patient) - mean F(cell) + gradient penalty.

    The concatenated codes are treated as constants (only the critic trains on
    this loss). ``eps`` holds one interpolation coefficient per pair; drawn
    from ``rng`` when omitted.
    """
    xc, xt = gc.as_tensor(batch_cell), gc.as_tensor(batch_patient)
    if xc.shape[0] != xt.shape[0]:
        raise ContractError(f"critic_loss needs equal batch sizes, got {xc.shape[0]} and {xt.shape[0]}")
    with gc.no_grad():
        hc = model.concat_repr(xc, "cell").data
        ht = model.concat_repr(xt, "patient").data
    return critic_loss_from_codes(hc, ht, model, gp_weight, eps=eps, rng=rng)


def critic_loss_from_codes(hc, ht, model, gp_weight, eps=None, rng=None):
    n = hc.shape[0]
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng()
        eps = rng.uniform(0.0, 1.0, size=(n, 1))
    eps = np.asarray(eps, dtype=np.float64).reshape(n, 1)
    score_gap = gc.mean(model.critic(gc.Tensor(ht))) - gc.mean(model.critic(gc.Tensor(hc)))
    interp = gc.Tensor(eps * hc + (1.0 - eps) * ht, requires_grad=True)
    # rows of the interpolate are independent, so d sum(F) / dL gives per-row gradients
    (g,) = gc.grad(gc.tsum(model.critic(interp)), [interp], create_graph=True)
    norms = gc.sqrt(gc.tsum(g * g, axis=1))
    penalty = gc.mean((norms - 1.0) * (norms - 1.0))
    return score_gap + gc.scalar_mul(penalty, gp_weight)


def gen_loss(batch_patient, model: WiserModel):
    return gc.neg(gc.mean(model.critic(model.concat_repr(batch_patient, "patient"))))


# -- training -----------------------------------------------------------------

class _Stream:
    """Endless without-replacement batches; reshuffles when a pass runs out."""

    def __init__(self, n, rng):
        self.n = n
        self.rng = rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def take(self, b):
        out = []
        while b > 0:
            if self.pos >= self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            k = min(b, self.n - self.pos)
            out.append(self.perm[self.pos:self.pos + k])
            self.pos += k
            b -= k
        return np.concatenate(out)


class PairedBatches:
    """Equal-size cell/patient batches; one epoch covers the larger domain once."""

    def __init__(self, n_cell, n_patient, batch_size, rng):
        self.batch = min(batch_size, n_cell, n_patient)
        self.cell = _Stream(n_cell, rng)
        self.patient = _Stream(n_patient, rng)
        self.steps_per_epoch = -(-max(n_cell, n_patient) // self.batch)

    def next(self):
        return self.cell.take(self.batch), self.patient.take(self.batch)


@dataclass
class TrainData:
    x_cell: np.ndarray
    y_cell: np.ndarray
    x_patient: np.ndarray


@dataclass
class TrainState:
    """Loss traces and the batch-step counters of the adversarial phase."""

    pretrain_trace: list = field(default_factory=list)
    adv_trace: list = field(default_factory=list)
    batch_steps: int = 0
    critic_updates: int = 0
    generator_updates: int = 0


def _check_finite(loss, phase, epoch, step):
    if not np.isfinite(loss.data).all():
        raise NumericError(f"non-finite {phase} loss at epoch {epoch}, batch {step}")


def pretrain(model: WiserModel, data: TrainData, cfg: TrainConfig, rng, state=None) -> TrainState:
    """``pretrain_epochs`` epochs of Adam on the unit-weighted pretraining loss."""
    state = state if state is not None else TrainState()
    if cfg.pretrain_epochs == 0:
        return state
    params = model.groups(GENERATOR_GROUPS)
    opt = gc.Adam(params, lr=cfg.lr_pretrain)
    batches = PairedBatches(len(data.x_cell), len(data.x_patient), cfg.batch_size, rng)
    for epoch in range(cfg.pretrain_epochs):
        total = 0.0
        for step in range(batches.steps_per_epoch):
            ic, it = batches.next()
            loss = pl_loss(model, data.x_cell[ic], data.y_cell[ic], data.x_patient[it], cfg)
            _check_finite(loss, "pretrain", epoch, step)
            opt.step(gc.grad(loss, params))
            total += loss.item()
        state.pretrain_trace.append(total / batches.steps_per_epoch)
        log.debug("pretrain epoch %d loss %.6f", epoch, state.pretrain_trace[-1])
    return state


def adversarial_train(model: WiserModel, data: TrainData, cfg: TrainConfig, rng, state=None) -> TrainState:
    """Critic step on every batch; generator step on every ``critic_steps``-th."""
    state = state if state is not None else TrainState()
    if cfg.adv_epochs == 0:
        return state
    gen_params = model.groups(GENERATOR_GROUPS)
    critic_params = model.group("critic")
    gen_opt = gc.Adam(gen_params, lr=cfg.lr_adv, betas=cfg.adv_betas)
    critic_opt = gc.Adam(critic_params, lr=cfg.lr_adv, betas=cfg.adv_betas)
    batches = PairedBatches(len(data.x_cell), len(data.x_patient), cfg.batch_size, rng)
    for epoch in range(cfg.adv_epochs):
        c_total, g_total, g_count = 0.0, 0.0, 0
        for step in range(batches.steps_per_epoch):
            ic, it = batches.next()
            loss = critic_loss(data.x_cell[ic], data.x_patient[it], model, cfg.gp_weight, rng=rng)
            _check_finite(loss, "critic", epoch, step)
            critic_opt.step(gc.grad(loss, critic_params))
            c_total += loss.item()
            state.critic_updates += 1
            state.batch_steps += 1
            if state.batch_steps % cfg.critic_steps == 0:
                ic, it = batches.next()
                x_t = data.x_patient[it]
                total = pl_loss(model, data.x_cell[ic], data.y_cell[ic], x_t, cfg) + gen_loss(x_t, model)
                _check_finite(total, "generator", epoch, step)
                gen_opt.step(gc.grad(total, gen_params))
                g_total += total.item()
                g_count += 1
                state.generator_updates += 1
        state.adv_trace.append((c_total / batches.steps_per_epoch, g_total / max(g_count, 1)))
    return state


def train_representation(model, data, cfg, rng) -> TrainState:
    state = pretrain(model, data, cfg, rng)
    return adversarial_train(model, data, cfg, rng, state)


def encode_dataset(model: WiserModel, x: np.ndarray, block=1024) -> Embeddings:
    """Z, W and C_S(x) for every row of ``x`` (frozen model)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.n_genes:
        raise ShapeError(f"expected {model.n_genes} genes, got shape {x.shape}")
    zs, ws, css = [], [], []
    with gc.no_grad():
        for start in range(0, x.shape[0], block):
            z, w, cs = model.represent(gc.Tensor(x[start:start + block]))
            zs.append(z.data)
            ws.append(w.data)
            css.append(cs.data)
    if not zs:
        d = model.latent_dim
        return Embeddings(np.zeros((0, d)), np.zeros((0, model.n_drugs)), np.zeros((0, d)))
    return Embeddings(np.vstack(zs), np.vstack(ws), np.vstack(css))
