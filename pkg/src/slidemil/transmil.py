"""Transformer MIL bag classifier with Nystrom self-attention.

Pipeline: project instances to model_dim, pad the sequence to a perfect
square with copies of the first tokens, prepend a learned class token, run
two pre-norm transformer layers whose self-attention uses the Nystrom
landmark approximation, apply a pyramid positional encoding (PPEG: 3/5/7
depthwise convolutions over the square token grid) between the layers, and
classify from the final class-token state. Loss is plain cross-entropy.

The padding-by-copies convention makes the model order sensitive when N is
not a perfect square; only determinism is promised, not permutation
invariance.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import DimMismatch, EmptyBag, NonFinite, NotSquare


@dataclass
class TransmilConfig:
    input_dim: int
    num_classes: int
    model_dim: int = 512
    num_heads: int = 8
    num_landmarks: int = 256
    pinv_iterations: int = 6
    dropout: float = 0.1

    def validate(self):
        if self.model_dim % self.num_heads != 0:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.num_landmarks < 1:
            raise ValueError("num_landmarks must be >= 1")
        if self.pinv_iterations < 1:
            raise ValueError("pinv_iterations must be >= 1")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("need input_dim >= 1 and num_classes >= 2")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class TokenSequence:
    """Class token + squared instance tokens for one bag."""
    tokens: Var          # (1 + M, model_dim)
    num_instances: int   # N
    num_padded: int      # M = ceil(sqrt(N))^2
    grid_side: int       # sqrt(M)


@dataclass
class TransmilForward:
    """Tape-bearing state of one forward pass."""
    sequence: TokenSequence
    logits: Var                     # (1, C)
    probs: Var                      # (1, C)
    cls_attention: np.ndarray       # (1+M,) class-token attention, layer 2
    cls_attention_layer1: np.ndarray

    @property
    def instance_attention(self):
        """Per-instance attention (class token's row, pad tokens dropped)."""
        n = self.sequence.num_instances
        return self.cls_attention[1:1 + n].copy()


def _segment_mean_matrix(n, m):
    """(m, n) constant matrix averaging m contiguous index segments."""
    mat = np.zeros((m, n))
    for row, seg in enumerate(np.array_split(np.arange(n), m)):
        mat[row, seg] = 1.0 / seg.size
    return mat


def _pinv_graph(A, iters):
    """Newton-Schulz-type iterative pseudo-inverse of (..., m, m) kernels.

    Init V0 = A^T / max column sum (valid for the row-stochastic softmax
    kernels this sees: their infinity norm is 1); then iterate
    V <- 0.25 V (13 I - A V (15 I - A V (7 I - A V))).
    """
    m = A.shape[-1]
    eye = np.eye(m)
    col_sums = ad.vsum(A, axis=-2)                      # (..., m)
    max_col = ad.vmax(col_sums, axis=-1, keepdims=True)  # (..., 1)
    scale = ad.div(1.0, ad.reshape(max_col, max_col.shape + (1,)))
    V = ad.mul(ad.transpose(A, tuple(range(A.ndim - 2)) + (A.ndim - 1, A.ndim - 2)),
               scale)
    for _ in range(iters):
        KV = ad.matmul(A, V)
        inner = ad.sub(7.0 * eye, KV)
        inner = ad.sub(15.0 * eye, ad.matmul(KV, inner))
        inner = ad.sub(13.0 * eye, ad.matmul(KV, inner))
        V = ad.mul(ad.matmul(V, inner), 0.25)
    if not np.isfinite(V.data).all():
        raise NonFinite("pseudo-inverse iteration diverged")
    return V


def iterative_pinv(A, iters=6):
    """Numpy-facing wrapper of the iterative pseudo-inverse."""
    return _pinv_graph(Var(np.asarray(A, dtype=np.float64)), iters).data


def _nystrom_graph(q, k, v, num_landmarks, pinv_iterations):
    """Nystrom attention on (H, n, d_head) Vars; q must be pre-scaled.

    Returns (out Var (H, n, d_head), cls_row ndarray (n,)): cls_row is the
    mean-over-heads attention row of token 0 under the approximated
    attention matrix A1 pinv(A2) A3.
    """
    n = q.shape[-2]
    m = min(num_landmarks, n)
    seg = Var(_segment_mean_matrix(n, m))
    q_l = ad.matmul(seg, q)                              # (H, m, d)
    k_l = ad.matmul(seg, k)
    kt = ad.transpose(k, (0, 2, 1))
    klt = ad.transpose(k_l, (0, 2, 1))
    A1 = ad.softmax(ad.matmul(q, klt), axis=-1)          # (H, n, m)
    A2 = ad.softmax(ad.matmul(q_l, klt), axis=-1)        # (H, m, m)
    A3 = ad.softmax(ad.matmul(q_l, kt), axis=-1)         # (H, m, n)
    Z = _pinv_graph(A2, pinv_iterations)
    out = ad.matmul(A1, ad.matmul(Z, ad.matmul(A3, v)))  # (H, n, d)
    cls_row = np.einsum("hm,hmk,hkn->hn", A1.data[:, 0, :], Z.data,
                        A3.data).mean(axis=0)
    return out, cls_row


def nystrom_attention(Q, K, V, num_landmarks, pinv_iterations=6):
    """Numpy-facing Nystrom attention for one head or a stack of heads.

    Args:
        Q, K, V: (n, d_head) or (H, n, d_head) arrays; Q is scaled by
            1/sqrt(d_head) internally.
        num_landmarks: m, clamped to the token count.
        pinv_iterations: Newton-Schulz iterations for pinv(A2).

    Returns:
        Array shaped like V: softmax(Q Kl^T / sqrt(d)) pinv(...) ... V.
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    single = Q.ndim == 2
    if single:
        Q, K, V = Q[None], K[None], V[None]
    scale = 1.0 / math.sqrt(Q.shape[-1])
    out, _ = _nystrom_graph(Var(Q * scale), Var(K), Var(V),
                            num_landmarks, pinv_iterations)
    return out.data[0] if single else out.data


def _xavier(rng, shape):
    std = np.sqrt(2.0 / (shape[0] + shape[1]))
    return rng.normal(0.0, std, size=shape)


class TransmilModel:
    """Two-layer Nystrom-attention transformer over instance tokens."""

    kind = "transmil"

    def __init__(self, config, rng=None):
        config.validate()
        self.config = config
        rng = rng or np.random.default_rng(0)
        dm = config.model_dim
        p = {}
        p["proj.W"] = _xavier(rng, (config.input_dim, dm))
        p["proj.b"] = np.zeros(dm)
        p["cls_token"] = rng.standard_normal((1, dm))
        for i in (1, 2):
            p[f"layer{i}.ln.g"] = np.ones(dm)
            p[f"layer{i}.ln.b"] = np.zeros(dm)
            p[f"layer{i}.qkv.W"] = _xavier(rng, (dm, 3 * dm))
            p[f"layer{i}.qkv.b"] = np.zeros(3 * dm)
            p[f"layer{i}.out.W"] = _xavier(rng, (dm, dm))
            p[f"layer{i}.out.b"] = np.zeros(dm)
        for ksize in (3, 5, 7):
            p[f"ppeg.conv{ksize}.K"] = rng.normal(
                0.0, 1.0 / ksize, size=(ksize, ksize, dm))
            p[f"ppeg.conv{ksize}.b"] = np.zeros(dm)
        p["norm.g"] = np.ones(dm)
        p["norm.b"] = np.zeros(dm)
        p["head.W"] = _xavier(rng, (dm, config.num_classes))
        p["head.b"] = np.zeros(config.num_classes)
        self.params = {k: Var(v, requires_grad=True) for k, v in p.items()}

    # --- blocks -------------------------------------------------------

    def tokenize(self, features):
        """Project, square-pad with copies of the first tokens, prepend cls.

        N instances become 1 + M tokens with M = ceil(sqrt(N))^2; the M - N
        pad tokens are copies of projected tokens 0..M-N-1.
        """
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] == 0:
            raise EmptyBag(f"bag features must be (N, D), got {features.shape}")
        if features.shape[1] != self.config.input_dim:
            raise DimMismatch(
                f"bag feature dim {features.shape[1]} != config input_dim "
                f"{self.config.input_dim}")
        n = features.shape[0]
        grid_side = math.isqrt(n)
        if grid_side * grid_side < n:
            grid_side += 1
        m = grid_side * grid_side
        h = ad.relu(ad.add(ad.matmul(Var(features), self.params["proj.W"]),
                           self.params["proj.b"]))
        if m > n:
            h = ad.concat([h, ad.getitem(h, slice(0, m - n))], axis=0)
        tokens = ad.concat([self.params["cls_token"], h], axis=0)
        return TokenSequence(tokens=tokens, num_instances=n, num_padded=m,
                             grid_side=grid_side)

    def _attention_layer(self, x, layer, train, rng):
        c = self.config
        p = self.params
        n = x.shape[0]
        dh = c.model_dim // c.num_heads
        y = ad.layer_norm(x, p[f"layer{layer}.ln.g"], p[f"layer{layer}.ln.b"])
        qkv = ad.add(ad.matmul(y, p[f"layer{layer}.qkv.W"]),
                     p[f"layer{layer}.qkv.b"])
        qkv = ad.transpose(ad.reshape(qkv, (n, 3, c.num_heads, dh)),
                           (1, 2, 0, 3))                     # (3, H, n, dh)
        q = ad.mul(ad.getitem(qkv, 0), 1.0 / math.sqrt(dh))
        k = ad.getitem(qkv, 1)
        v = ad.getitem(qkv, 2)
        heads, cls_row = _nystrom_graph(q, k, v, c.num_landmarks,
                                        c.pinv_iterations)
        merged = ad.reshape(ad.transpose(heads, (1, 0, 2)), (n, c.model_dim))
        out = ad.add(ad.matmul(merged, p[f"layer{layer}.out.W"]),
                     p[f"layer{layer}.out.b"])
        out = ad.dropout(out, c.dropout, rng, train)
        return ad.add(x, out), cls_row

    def ppeg(self, sequence):
        """Add 3/5/7 depthwise-convolved copies of the token grid (residual).

        The class token passes through unchanged; the M instance tokens are
        reshaped to the grid_side x grid_side x model_dim grid for the
        convolutions (zero padding at the borders).
        """
        tokens = sequence.tokens
        g = sequence.grid_side
        m = tokens.shape[0] - 1
        if g * g != m:
            raise NotSquare(f"{m} grid tokens do not form a {g}x{g} square")
        cls = ad.getitem(tokens, slice(0, 1))
        grid = ad.reshape(ad.getitem(tokens, slice(1, 1 + m)),
                          (g, g, self.config.model_dim))
        out = grid
        for ksize in (3, 5, 7):
            conv = ad.depthwise_conv(grid, self.params[f"ppeg.conv{ksize}.K"])
            out = ad.add(out, ad.add(conv, self.params[f"ppeg.conv{ksize}.b"]))
        flat = ad.reshape(out, (m, self.config.model_dim))
        return TokenSequence(tokens=ad.concat([cls, flat], axis=0),
                             num_instances=sequence.num_instances,
                             num_padded=sequence.num_padded,
                             grid_side=g)

    # --- forward / loss -------------------------------------------------

    def forward(self, features, train=False, rng=None):
        seq = self.tokenize(features)
        x, attn1 = self._attention_layer(seq.tokens, 1, train, rng)
        seq2 = self.ppeg(TokenSequence(x, seq.num_instances, seq.num_padded,
                                       seq.grid_side))
        x, attn2 = self._attention_layer(seq2.tokens, 2, train, rng)
        x = ad.layer_norm(x, self.params["norm.g"], self.params["norm.b"])
        cls_state = ad.getitem(x, slice(0, 1))              # (1, dm)
        logits = ad.add(ad.matmul(cls_state, self.params["head.W"]),
                        self.params["head.b"])
        probs = ad.softmax(logits, axis=-1)
        return TransmilForward(
            sequence=TokenSequence(x, seq.num_instances, seq.num_padded,
                                   seq.grid_side),
            logits=logits, probs=probs,
            cls_attention=attn2, cls_attention_layer1=attn1)

    def loss(self, fwd, label):
        """Cross-entropy on the class-token logits."""
        log_probs = ad.log_softmax(fwd.logits, axis=-1)
        ce = -ad.getitem(log_probs, (0, int(label)))
        return ce, float(ce.data), 0.0

    def predict(self, features):
        """Eval-mode forward; returns (probabilities, per-instance attention)."""
        fwd = self.forward(features, train=False)
        return fwd.probs.data[0].copy(), fwd.instance_attention


def transmil_forward(features, config, rng=None):
    """One-shot functional forward; returns (probabilities, instance attention)."""
    model = TransmilModel(config, rng=rng)
    return model.predict(features)
