"""Text-guided frame fusion, Gaussian uncertainty estimation and the training losses.

Shapes follow the convention ``(..., T, D)`` for per-frame embeddings and
``(..., D)`` for pooled ones, so every function works on a single example
or on a batch with arbitrary leading dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AttentionBlock, Mlp2, ParamStore, Tensor
from .errors import ShapeError, ValidationError, VocabError
from .representation import FrameStack

HAND_PROMPT = ("a", "series", "of", "photos", "recording", "action", "for")
PERIOD = "."
MASK_FILL = -1e9


# ---------------------------------------------------------------------------
# encoders

class ToyEventEncoder:
    """Frame -> embedding stand-in for a pre-trained event encoder.

    Frames are sum-pooled by ``downsample``, scaled by their own maximum and
    flattened; ``n_time`` sinusoidal features of the frame's relative
    position in the stream are appended before the two-layer MLP.
    """

    def __init__(self, store: ParamStore, prefix: str, frame_hw: tuple[int, int], dim: int = 32,
                 hidden: int = 64, downsample: int = 4, n_time: int = 4, channels: int = 2):
        if n_time % 2:
            raise ValidationError("n_time must be even (sin/cos pairs)")
        self.frame_hw, self.downsample, self.n_time, self.channels = frame_hw, downsample, n_time, channels
        h, w = frame_hw
        self.grid = (-(-h // downsample), -(-w // downsample))
        self.input_dim = channels * self.grid[0] * self.grid[1] + n_time
        self.dim = dim
        self.mlp = Mlp2(store, prefix, self.input_dim, hidden, dim)

    def features(self, frames: FrameStack) -> np.ndarray:
        """Parameter-free preprocessing of a frame stack to a T x input_dim array."""
        f = np.asarray(frames.frames, dtype=np.float64)
        if f.ndim != 4 or f.shape[1:3] != tuple(self.frame_hw) or f.shape[3] != self.channels:
            raise ShapeError(f"expected frames (T, {self.frame_hw[0]}, {self.frame_hw[1]}, "
                             f"{self.channels}), got {f.shape}")
        t = len(f)
        s = self.downsample
        gh, gw = self.grid
        padded = np.zeros((t, gh * s, gw * s, self.channels))
        padded[:, :f.shape[1], :f.shape[2]] = f
        pooled = padded.reshape(t, gh, s, gw, s, self.channels).sum(axis=(2, 4)).reshape(t, -1)
        peak = pooled.max(axis=1, keepdims=True)
        pooled = pooled / np.where(peak > 0, peak, 1.0)
        pos = frames.positions()[:, None]
        k = np.arange(1, self.n_time // 2 + 1)[None, :]
        timef = np.concatenate([np.sin(np.pi * k * pos), np.cos(np.pi * k * pos)], axis=1)
        return np.concatenate([pooled, timef], axis=1)

    def __call__(self, features) -> Tensor:
        return self.mlp(features)


def encode_events(encoder: ToyEventEncoder, frames: FrameStack) -> Tensor:
    """T x D embedding, one row per frame."""
    if len(frames) == 0:
        raise ValidationError("cannot encode an empty frame stack")
    return encoder(encoder.features(frames))


class ToyTextEncoder:
    """Mean-pooled word embeddings for a hand-crafted and a learnable prompt.

    The hand-crafted path embeds ``a series of photos recording action for
    <class tokens> .``; the learnable path embeds ``n_prompt`` free vectors
    followed by the class tokens. The two pooled vectors are averaged.
    """

    def __init__(self, store: ParamStore, prefix: str, vocab: Sequence[str], dim: int = 32,
                 n_prompt: int = 4):
        words = list(dict.fromkeys([*HAND_PROMPT, PERIOD, *vocab]))
        self.vocab = {w: i for i, w in enumerate(words)}
        self.dim, self.n_prompt = dim, n_prompt
        self.embed = store.add(f"{prefix}.embed", store.rng.normal(0, 1.0, (len(words), dim)))
        self.prompt = store.add(f"{prefix}.prompt", store.rng.normal(0, 1.0, (n_prompt, dim)))
        self._hand_ids = [self.vocab[w] for w in HAND_PROMPT]
        self._period = self.vocab[PERIOD]

    def ids(self, tokens) -> list[int]:
        if isinstance(tokens, str):
            tokens = tokens.split()
        out = []
        for tok in tokens:
            if isinstance(tok, (int, np.integer)):
                if not 0 <= tok < len(self.vocab):
                    raise VocabError(f"token id {tok} outside vocabulary of size {len(self.vocab)}")
                out.append(int(tok))
            elif tok in self.vocab:
                out.append(self.vocab[tok])
            else:
                raise VocabError(f"unknown token {tok!r}")
        if not out:
            raise ValidationError("class token sequence is empty")
        return out

    def pooling_matrices(self, captions) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Averaging weights so each path is one matmul over the embedding table."""
        v = len(self.vocab)
        hand = np.zeros((len(captions), v))
        learn = np.zeros((len(captions), v))
        prompt_w = np.zeros((len(captions), self.n_prompt))
        for r, cap in enumerate(captions):
            cls_ids = self.ids(cap)
            seq = self._hand_ids + cls_ids + [self._period]
            np.add.at(hand[r], seq, 1.0 / len(seq))
            n = self.n_prompt + len(cls_ids)
            np.add.at(learn[r], cls_ids, 1.0 / n)
            prompt_w[r] = 1.0 / n
        return hand, learn, prompt_w

    def paths(self, captions) -> tuple[Tensor, Tensor]:
        hand, learn, prompt_w = self.pooling_matrices(captions)
        f_hand = ad.matmul(hand, self.embed)
        f_learn = ad.matmul(learn, self.embed) + ad.matmul(prompt_w, self.prompt)
        return f_hand, f_learn

    def encode_many(self, captions) -> Tensor:
        f_hand, f_learn = self.paths(captions)
        return (f_hand + f_learn) * 0.5


def encode_text(encoder: ToyTextEncoder, class_tokens) -> Tensor:
    """D-dimensional text embedding of one class label or caption."""
    return encoder.encode_many([class_tokens])[0]


# ---------------------------------------------------------------------------
# fusion

class Fusion(NamedTuple):
    fused: Tensor       # (..., D)
    weights: Tensor     # (..., T)
    event_proj: Tensor  # (..., T, D)
    text_proj: Tensor   # (..., D)


def _masked_logits(logits: Tensor, mask) -> Tensor:
    if mask is None:
        return logits
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape[-mask.ndim:]:
        raise ShapeError(f"mask shape {mask.shape} does not match logits {logits.shape}")
    return logits + np.where(mask, 0.0, MASK_FILL)


def cr_fusion(f_e, f_t, proj_e: Mlp2, proj_t: Mlp2, mask=None) -> Fusion:
    """Text-conditioned softmax weighting of the T projected frame embeddings.

    ``w = softmax_T(proj_e(f_e) . proj_t(f_t))`` and the fused embedding is
    ``sum_T w_t proj_e(f_e)_t``. ``mask`` (..., T) excludes padded frames.
    """
    fe_p = proj_e(f_e)
    ft_p = proj_t(f_t)
    if fe_p.shape[-1] != ft_p.shape[-1]:
        raise ShapeError(f"projected dims differ: {fe_p.shape} vs {ft_p.shape}")
    logits = (fe_p * ad.reshape(ft_p, ft_p.shape[:-1] + (1, ft_p.shape[-1]))).sum(axis=-1)
    w = ad.softmax(_masked_logits(logits, mask), axis=-1)
    fused = (ad.reshape(w, w.shape + (1,)) * fe_p).sum(axis=-2)
    return Fusion(fused, w, fe_p, ft_p)


def cr_fusion_all(fe_p: Tensor, ft_p: Tensor, mask=None) -> tuple[Tensor, Tensor]:
    """Fuse every event (B, T, D) against every text (K, D): returns (B, K, D) and weights (B, K, T)."""
    logits = fe_p @ ft_p.T  # B, T, K
    logits = ad.swapaxes(logits, -1, -2)  # B, K, T
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)[:, None, :]
        logits = logits + np.where(mask, 0.0, MASK_FILL)
    w = ad.softmax(logits, axis=-1)
    return w @ fe_p, w


def mean_pool(fe_p: Tensor, mask=None) -> Tensor:
    """Masked mean over the frame axis (the fusion used when CR is ablated)."""
    if mask is None:
        return fe_p.mean(axis=-2)
    m = np.asarray(mask, dtype=np.float64)
    return (fe_p * m[..., None]).sum(axis=-2) / m.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# uncertainty estimation

@dataclass
class GaussianEmbedding:
    mu: Tensor
    sigma: Tensor


def _as_tokens(half: Tensor) -> Tensor:
    # every channel becomes one width-2 token (value repeated in both slots)
    return ad.stack([half, half], axis=-1)


def uncertainty_estimate(f, att1: AttentionBlock, att2: AttentionBlock) -> GaussianEmbedding:
    """Split ``f`` (..., D) into channel halves; attention on each gives mu and sigma.

    Each half of D/2 channels is read as a sequence of D/2 width-2 tokens,
    so the flattened attention output has D entries. sigma passes through
    softplus to stay non-negative.
    """
    f = ad.as_tensor(f)
    d = f.shape[-1]
    if d % 2:
        raise ShapeError(f"embedding dim must be even to split in halves, got {d}")
    for blk in (att1, att2):
        if blk.dim != 2:
            raise ShapeError(f"{blk.prefix}: token width must be 2, got {blk.dim}")
    half = d // 2
    lead = f.shape[:-1]
    mu = ad.reshape(att1(_as_tokens(f[..., :half])), lead + (d,))
    raw = ad.reshape(att2(_as_tokens(f[..., half:])), lead + (d,))
    return GaussianEmbedding(mu, ad.softplus(raw))


@dataclass
class SampleSet:
    samples: Tensor  # (N, ..., D)
    delta: np.ndarray
    source: str = "event"

    def __len__(self):
        return self.samples.shape[0]


def reparam_sample(g: GaussianEmbedding, n: int, rng, source: str = "event") -> SampleSet:
    """``n`` draws ``mu + delta * sigma`` with ``delta ~ N(0, I)``, differentiable in mu and sigma."""
    if n < 1:
        raise ValidationError(f"need at least one sample, got {n}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    delta = rng.standard_normal((n,) + g.mu.shape)
    return SampleSet(g.mu + delta * g.sigma, delta, source)


# ---------------------------------------------------------------------------
# losses

@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    theta: float = 1.0
    n_samples: int = 5

    def __post_init__(self):
        if not self.tau > 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")
        if self.n_samples < 1:
            raise ValidationError(f"n_samples must be >= 1, got {self.n_samples}")


def smooth_l1_loss(sample, target_normalized) -> Tensor:
    """Mean over all coordinates of the smooth-L1 penalty of ``sample - target``."""
    sample, target = ad.as_tensor(sample), ad.as_tensor(target_normalized)
    if sample.shape[-1] != target.shape[-1]:
        raise ShapeError(f"sample {sample.shape} and target {target.shape} differ")
    return ad.smooth_l1(sample - target).mean()


def reg_loss(g_e: GaussianEmbedding, g_t: GaussianEmbedding) -> Tensor:
    """sum(sigma_e^2) + sum(sigma_t^2), averaged over any batch dimensions."""
    per = (g_e.sigma * g_e.sigma).sum(axis=-1) + (g_t.sigma * g_t.sigma).sum(axis=-1)
    return per.mean() if per.ndim else per


def contrastive_from_logits(logits) -> Tensor:
    """Symmetric InfoNCE of a (..., B, B) similarity matrix whose diagonal holds the positives."""
    logits = ad.as_tensor(logits)
    b = logits.shape[-1]
    if logits.shape[-2] != b:
        raise ShapeError(f"logit matrix must be square, got {logits.shape}")
    eye = np.eye(b)
    rows = (ad.log_softmax(logits, axis=-1) * eye).sum(axis=(-1, -2)) * (1.0 / b)
    cols = (ad.log_softmax(logits, axis=-2) * eye).sum(axis=(-1, -2)) * (1.0 / b)
    return -((rows + cols) * 0.5).mean()


def contrastive_loss(f1, f2, tau: float) -> Tensor:
    """Symmetric InfoNCE over a batch of paired rows (..., B, D).

    Rows are L2-normalised; the loss averages the f1->f2 and f2->f1
    cross-entropies of the matched pairs, and any leading dimensions.
    """
    if not tau > 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    f1, f2 = ad.as_tensor(f1), ad.as_tensor(f2)
    if f1.shape[-2:] != f2.shape[-2:]:
        raise ShapeError(f"paired batches differ: {f1.shape} vs {f2.shape}")
    return contrastive_from_logits((ad.l2_normalize(f1) @ ad.l2_normalize(f2).T) * (1.0 / tau))


def pair_fused_logits(fused_pairs, f_t, tau: float) -> Tensor:
    """Cosine logits ``[i, j] = cos(fuse(event i | text j), text j) / tau``.

    ``fused_pairs`` is (..., B, B, D) and ``f_t`` is (..., B, D).
    """
    if not tau > 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    me = ad.l2_normalize(fused_pairs)
    mt = ad.l2_normalize(f_t)
    mt = ad.reshape(mt, mt.shape[:-2] + (1,) + mt.shape[-2:])
    return (me * mt).sum(axis=-1) * (1.0 / tau)


def sample_contrastive(event_samples: SampleSet, text_samples: SampleSet, tau: float) -> Tensor:
    """Contrastive loss averaged over all N x N event-sample / text-sample pairings."""
    se, st = event_samples.samples, text_samples.samples
    se = ad.reshape(se, (se.shape[0], 1) + se.shape[1:])
    st = ad.reshape(st, (1,) + st.shape)
    return contrastive_loss(se, st, tau)


def final_loss(event_samples: SampleSet, text_samples: SampleSet, f_e_fuse, f_t,
               g_e: GaussianEmbedding, g_t: GaussianEmbedding, cfg: LossConfig, l_con=None):
    """alpha * contrastive + beta * smooth-L1 + theta * reg.

    ``f_e_fuse`` and ``f_t`` are the pooled embeddings the Gaussians were
    estimated from; their mean/std-normalised versions are the smooth-L1
    targets. A precomputed contrastive term may be passed as ``l_con``.
    Returns the scalar loss and a float breakdown per term.
    """
    if l_con is None:
        l_con = sample_contrastive(event_samples, text_samples, cfg.tau)
    target_e = ad.mean_std_normalize(f_e_fuse)
    target_t = ad.mean_std_normalize(f_t)
    l_sl1 = (smooth_l1_loss(event_samples.samples, target_e)
             + smooth_l1_loss(text_samples.samples, target_t)) * 0.5
    l_reg = reg_loss(g_e, g_t)
    total = l_con * cfg.alpha + l_sl1 * cfg.beta + l_reg * cfg.theta
    breakdown = {
        "contrastive": l_con.item(),
        "smooth_l1": l_sl1.item(),
        "reg": l_reg.item(),
        "final": total.item(),
    }
    return total, breakdown


# ---------------------------------------------------------------------------
# the assembled model

@dataclass(frozen=True)
class ModelConfig:
    frame_hw: tuple[int, int] = (32, 32)
    downsample: int = 4
    n_time: int = 4
    enc_hidden: int = 64
    d_event: int = 32
    d_text: int = 32
    proj_hidden: int = 32
    d_joint: int = 32
    n_prompt: int = 4
    # score every (event, text) batch pair with the event fused under that text
    pair_fusion: bool = True


class CrueModel:
    """Toy encoders, projections and the two attention blocks in one ParamStore.

    ``use_cr=False`` swaps text-guided fusion for mean pooling and
    ``use_ue=False`` drops the Gaussian head (embeddings are used directly).
    """

    def __init__(self, vocab: Sequence[str], config: ModelConfig = ModelConfig(), seed: int = 0,
                 use_cr: bool = True, use_ue: bool = True):
        self.config, self.use_cr, self.use_ue = config, use_cr, use_ue
        self.store = ParamStore(seed)
        c = config
        self.event_encoder = ToyEventEncoder(self.store, "event_enc", c.frame_hw, c.d_event,
                                             c.enc_hidden, c.downsample, c.n_time)
        self.text_encoder = ToyTextEncoder(self.store, "text_enc", vocab, c.d_text, c.n_prompt)
        self.proj_e = Mlp2(self.store, "proj_e", c.d_event, c.proj_hidden, c.d_joint)
        self.proj_t = Mlp2(self.store, "proj_t", c.d_text, c.proj_hidden, c.d_joint)
        self.att1 = AttentionBlock(self.store, "att1", 2)
        self.att2 = AttentionBlock(self.store, "att2", 2)

    # -- pieces -----------------------------------------------------------
    def frame_features(self, frames: FrameStack) -> np.ndarray:
        return self.event_encoder.features(frames)

    def text_proj(self, captions) -> Tensor:
        return self.proj_t(self.text_encoder.encode_many(captions))

    def gaussian(self, f) -> GaussianEmbedding:
        return uncertainty_estimate(f, self.att1, self.att2)

    def head(self, f) -> Tensor:
        """Deterministic embedding used for scoring: mu, or f itself without UE."""
        return self.gaussian(f).mu if self.use_ue else ad.as_tensor(f)

    # -- training objective ------------------------------------------------
    def loss(self, feats: np.ndarray, mask: np.ndarray, captions, labels, cfg: LossConfig, rng):
        """Composite loss of one batch.

        ``feats`` (B, T, F) are padded frame features with validity ``mask``
        (B, T); ``captions`` lists the K class captions and ``labels`` gives
        each item's class.
        """
        f_e = self.event_encoder(feats)
        f_t_all = self.text_encoder.encode_many(captions)
        onehot = np.eye(len(captions))[np.asarray(labels)]
        f_t = ad.matmul(onehot, f_t_all)
        if self.use_cr and self.config.pair_fusion:
            return self._pair_loss(f_e, f_t, mask, cfg, rng)
        if self.use_cr:
            fusion = cr_fusion(f_e, f_t, self.proj_e, self.proj_t, mask)
            fused, ft_p = fusion.fused, fusion.text_proj
        else:
            fused = mean_pool(self.proj_e(f_e), mask)
            ft_p = self.proj_t(f_t)
        if not self.use_ue:
            return self._contrastive_only(contrastive_loss(fused, ft_p, cfg.tau), cfg)
        g_e, g_t = self.gaussian(fused), self.gaussian(ft_p)
        s_e = reparam_sample(g_e, cfg.n_samples, rng, "event")
        s_t = reparam_sample(g_t, cfg.n_samples, rng, "text")
        return final_loss(s_e, s_t, fused, ft_p, g_e, g_t, cfg)

    @staticmethod
    def _contrastive_only(l_con, cfg):
        total = l_con * cfg.alpha
        return total, {"contrastive": l_con.item(), "smooth_l1": 0.0, "reg": 0.0, "final": total.item()}

    def _pair_loss(self, f_e, f_t, mask, cfg, rng):
        """Contrastive term over all in-batch pairs, each event fused under the paired text.

        This is the same comparison ``class_scores`` makes at inference; the
        smooth-L1 and regulariser terms use the matched (diagonal) pairs.
        """
        fe_p, ft_p = self.proj_e(f_e), self.proj_t(f_t)
        pairs, _ = cr_fusion_all(fe_p, ft_p, mask)  # event, text, D
        diag = np.arange(pairs.shape[0])
        if not self.use_ue:
            return self._contrastive_only(contrastive_from_logits(pair_fused_logits(pairs, ft_p, cfg.tau)), cfg)
        g_pairs, g_t = self.gaussian(pairs), self.gaussian(ft_p)
        s_pairs = reparam_sample(g_pairs, cfg.n_samples, rng, "event")
        s_t = reparam_sample(g_t, cfg.n_samples, rng, "text")
        n = cfg.n_samples
        # every event-sample x text-sample pairing: (n, n, B, B) logits
        se = ad.reshape(s_pairs.samples, (n, 1) + pairs.shape)
        st_ = ad.reshape(s_t.samples, (1, n) + ft_p.shape)
        l_con = contrastive_from_logits(pair_fused_logits(se, st_, cfg.tau))
        g_e = GaussianEmbedding(g_pairs.mu[diag, diag], g_pairs.sigma[diag, diag])
        s_e = SampleSet(s_pairs.samples[:, diag, diag], s_pairs.delta[:, diag, diag], "event")
        return final_loss(s_e, s_t, pairs[diag, diag], ft_p, g_e, g_t, cfg, l_con=l_con)

    # -- inference ----------------------------------------------------------
    def class_scores(self, feats: np.ndarray, mask: np.ndarray, captions) -> np.ndarray:
        """(B, K) cosine similarity of each event against each class text.

        With CR the event is fused once per candidate class, conditioned on
        that class's text, before comparison.
        """
        with ad.no_grad():
            ft_p = self.text_proj(captions)
            mt = ad.l2_normalize(self.head(ft_p)).data  # K, D
            fe_p = self.proj_e(self.event_encoder(feats))
            if self.use_cr:
                fused, _ = cr_fusion_all(fe_p, ft_p, mask)  # B, K, D
                me = ad.l2_normalize(self.head(fused)).data
                return np.einsum("bkd,kd->bk", me, mt)
            me = ad.l2_normalize(self.head(mean_pool(fe_p, mask))).data  # B, D
            return me @ mt.T

    def event_embedding(self, feats: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Text-free event embedding (uniform frame weights), for event-to-event search."""
        with ad.no_grad():
            fe_p = self.proj_e(self.event_encoder(feats))
            return ad.l2_normalize(self.head(mean_pool(fe_p, mask))).data

    def text_embedding(self, captions) -> np.ndarray:
        with ad.no_grad():
            return ad.l2_normalize(self.head(self.text_proj(captions))).data
