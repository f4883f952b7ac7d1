"""Attention-MIL bag classifier with instance clustering.

Single-branch (SB) mode pools the bag with one gated-attention branch and
scores it with a C-way linear head. Multi-branch (MB) mode keeps one
attention branch and one binary bag head per class. Both modes add an
instance-level clustering loss: the top-attended instances of the bag's
class branch are pseudo-labeled positive, the bottom ones negative, and a
smooth top-1 SVM loss is applied to linear instance classifiers; MB
additionally pseudo-labels top instances of the other branches negative.

All math runs on the float64 autodiff tape; public helpers accept plain
numpy and return plain numpy.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import DimMismatch, EmptyBag, ShapeMismatch


@dataclass
class ClamConfig:
    input_dim: int
    num_classes: int
    branch_mode: str = "SB"          # "SB" | "MB"
    embed_dim: int = 512
    attn_hidden: int = 256
    instances_per_side: int = 8      # B: positives and negatives per branch
    bag_loss_weight: float = 0.7     # c1
    instance_loss_weight: float = 0.3  # c2
    svm_temperature: float = 1.0
    svm_margin: float = 1.0
    dropout: float = 0.25

    def validate(self):
        if self.branch_mode not in ("SB", "MB"):
            raise ValueError(f"branch_mode must be SB or MB, got {self.branch_mode}")
        if abs(self.bag_loss_weight + self.instance_loss_weight - 1.0) > 1e-9:
            raise ValueError("bag and instance loss weights must sum to 1")
        if self.instances_per_side < 1:
            raise ValueError("instances_per_side must be >= 1")
        if self.svm_temperature <= 0:
            raise ValueError("svm_temperature must be positive")
        if self.svm_margin < 0:
            raise ValueError("svm_margin must be non-negative")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("need input_dim >= 1 and num_classes >= 2")

    def to_dict(self):
        return dict(self.__dict__)

    @property
    def num_branches(self):
        return self.num_classes if self.branch_mode == "MB" else 1


@dataclass
class AttentionOutput:
    """Eval-time view of one forward pass."""
    attention_weights: np.ndarray     # (N,) for SB, (C, N) for MB
    slide_representation: np.ndarray  # (num_branches, embed_dim)
    logits: np.ndarray                # (C,)
    instance_scores: np.ndarray       # raw attention logits, same shape as weights


@dataclass
class ClamForward:
    """Tape-bearing intermediates of one forward pass."""
    embedded: Var        # (N, embed_dim)
    attn_raw: Var        # (num_branches, N)
    weights: Var         # (num_branches, N)
    pooled: Var          # (num_branches, embed_dim)
    logits: Var          # (1, C)
    probs: Var           # (1, C)


def _xavier(rng, shape):
    fan_in, fan_out = shape[0], shape[1]
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape)


def _smooth_svm_core(scores, targets, alpha, tau):
    """Smooth top-1 SVM loss on a Var of (M, 2) scores; returns scalar Var."""
    targets = np.asarray(targets, dtype=np.intp)
    onehot = np.zeros(scores.shape)
    onehot[np.arange(targets.size), targets] = 1.0
    margin = alpha * (1.0 - onehot)
    score_true = ad.vsum(ad.mul(scores, onehot), axis=1, keepdims=True)
    z = ad.div(ad.add(margin, ad.sub(scores, score_true)), tau)
    per_instance = ad.mul(ad.logsumexp(z, axis=1), tau)
    return per_instance.mean()


def smooth_svm_loss(scores, targets, alpha=1.0, tau=1.0):
    """Temperature-smoothed multiclass hinge, averaged over instances.

    L_i = tau * ln sum_j exp((alpha*1[j != y_i] + s_ij - s_iy) / tau).

    Args:
        scores: (M, K) array of class scores per selected instance (K=2 for
            the binary instance clustering task), or a single length-K row.
        targets: length-M integer targets.
        alpha: margin.
        tau: temperature (> 0).

    Returns:
        Nonnegative float.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    targets = np.atleast_1d(targets)
    return float(_smooth_svm_core(Var(scores), targets, alpha, tau).data)


def select_instances(attn_logits, B, branch_class, bag_label):
    """Rank instances by attention and pseudo-label the extremes.

    For the bag's own class branch the top B_eff instances get target 1 and
    the bottom B_eff get target 0; for other branches (MB) the top B_eff get
    target 0. B_eff = min(B, N // 2). Ties resolve to the lower index.

    Returns:
        (indices, targets) as int arrays; indices lists positives first.
    """
    attn_logits = np.asarray(attn_logits, dtype=np.float64).reshape(-1)
    n = attn_logits.size
    if n < 2:
        raise EmptyBag(f"need >= 2 instances to cluster, got {n}")
    b_eff = min(int(B), n // 2)
    descending = np.argsort(-attn_logits, kind="stable")
    ascending = np.argsort(attn_logits, kind="stable")
    top = descending[:b_eff]
    if branch_class == bag_label:
        bottom = ascending[:b_eff]
        indices = np.concatenate([top, bottom])
        targets = np.concatenate([np.ones(b_eff, dtype=np.intp),
                                  np.zeros(b_eff, dtype=np.intp)])
    else:
        indices = top
        targets = np.zeros(b_eff, dtype=np.intp)
    return indices, targets


class ClamModel:
    """Gated-attention MIL classifier (SB or MB head)."""

    kind = "clam"

    def __init__(self, config, rng=None):
        config.validate()
        self.config = config
        rng = rng or np.random.default_rng(0)
        c = config
        K = c.num_branches
        p = {}
        p["embed.W"] = _xavier(rng, (c.input_dim, c.embed_dim))
        p["embed.b"] = np.zeros(c.embed_dim)
        p["attn.V"] = _xavier(rng, (c.embed_dim, c.attn_hidden))
        p["attn.U"] = _xavier(rng, (c.embed_dim, c.attn_hidden))
        p["attn.w"] = _xavier(rng, (c.attn_hidden, K))
        if c.branch_mode == "SB":
            p["clf0.W"] = _xavier(rng, (c.embed_dim, c.num_classes))
            p["clf0.b"] = np.zeros(c.num_classes)
        else:
            for cls in range(c.num_classes):
                p[f"clf{cls}.W"] = _xavier(rng, (c.embed_dim, 1))
                p[f"clf{cls}.b"] = np.zeros(1)
        for cls in range(c.num_classes):
            p[f"inst{cls}.W"] = _xavier(rng, (c.embed_dim, 2))
            p[f"inst{cls}.b"] = np.zeros(2)
        self.params = {k: Var(v, requires_grad=True) for k, v in p.items()}

    # --- forward -----------------------------------------------------

    def forward(self, features, train=False, rng=None):
        """Run the bag through attention pooling and the bag head.

        Args:
            features: (N, D) array.
            train: apply dropout when True (requires rng).
            rng: numpy Generator for dropout masks.

        Returns:
            ClamForward with tape-bearing intermediates.
        """
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] == 0:
            raise EmptyBag(f"bag features must be (N, D), got {features.shape}")
        if features.shape[1] != self.config.input_dim:
            raise DimMismatch(
                f"bag feature dim {features.shape[1]} != config input_dim "
                f"{self.config.input_dim}")
        p = self.params
        drop = self.config.dropout
        x = Var(features)
        h = ad.relu(ad.add(ad.matmul(x, p["embed.W"]), p["embed.b"]))
        h = ad.dropout(h, drop, rng, train)
        gate_a = ad.dropout(ad.tanh(ad.matmul(h, p["attn.V"])), drop, rng, train)
        gate_b = ad.dropout(ad.sigmoid(ad.matmul(h, p["attn.U"])), drop, rng, train)
        attn_raw = ad.transpose(ad.matmul(ad.mul(gate_a, gate_b), p["attn.w"]))
        weights = ad.softmax(attn_raw, axis=-1)          # (K, N)
        pooled = ad.matmul(weights, h)                   # (K, embed)
        if self.config.branch_mode == "SB":
            logits = ad.add(ad.matmul(pooled, p["clf0.W"]), p["clf0.b"])
        else:
            pieces = []
            for cls in range(self.config.num_classes):
                row = ad.getitem(pooled, slice(cls, cls + 1))   # (1, embed)
                pieces.append(ad.add(ad.matmul(row, p[f"clf{cls}.W"]),
                                     p[f"clf{cls}.b"]))
            logits = ad.concat(pieces, axis=1)           # (1, C)
        probs = ad.softmax(logits, axis=-1)
        return ClamForward(embedded=h, attn_raw=attn_raw, weights=weights,
                           pooled=pooled, logits=logits, probs=probs)

    def loss(self, fwd, label):
        """Weighted bag cross-entropy plus pooled instance clustering loss.

        Returns:
            (total Var, bag_ce float, instance_svm float)
        """
        c = self.config
        label = int(label)
        log_probs = ad.log_softmax(fwd.logits, axis=-1)
        bag_ce = -ad.getitem(log_probs, (0, label))

        score_parts, target_parts = [], []
        attn_data = fwd.attn_raw.data
        for branch in range(c.num_branches):
            branch_class = branch if c.branch_mode == "MB" else label
            indices, targets = select_instances(
                attn_data[branch], c.instances_per_side, branch_class, label)
            selected = ad.take_rows(fwd.embedded, indices)
            scores = ad.add(ad.matmul(selected, self.params[f"inst{branch_class}.W"]),
                            self.params[f"inst{branch_class}.b"])
            score_parts.append(scores)
            target_parts.append(targets)
        all_scores = score_parts[0] if len(score_parts) == 1 \
            else ad.concat(score_parts, axis=0)
        all_targets = np.concatenate(target_parts)
        inst_svm = _smooth_svm_core(all_scores, all_targets,
                                    c.svm_margin, c.svm_temperature)
        total = ad.add(ad.mul(bag_ce, c.bag_loss_weight),
                       ad.mul(inst_svm, c.instance_loss_weight))
        return total, float(bag_ce.data), float(inst_svm.data)

    def predict(self, features):
        """Eval-mode forward; returns (AttentionOutput, probabilities)."""
        fwd = self.forward(features, train=False)
        weights = fwd.weights.data
        raw = fwd.attn_raw.data
        if self.config.branch_mode == "SB":
            weights, raw = weights[0], raw[0]
        out = AttentionOutput(attention_weights=weights.copy(),
                              slide_representation=fwd.pooled.data.copy(),
                              logits=fwd.logits.data[0].copy(),
                              instance_scores=raw.copy())
        return out, fwd.probs.data[0].copy()


# --- functional helpers (plain numpy in, plain numpy out) ---------------


def gated_attention(h, V, U, w):
    """Attention weights and raw logits for instance embeddings h.

    weights = softmax over instances of w^T (tanh(h V) * sigmoid(h U)).

    Args:
        h: (N, embed_dim); V, U: (embed_dim, attn_hidden); w: (attn_hidden, K).

    Returns:
        (weights (K, N), raw logits (K, N))
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] == 0:
        raise EmptyBag(f"need (N, embed_dim) embeddings, got {h.shape}")
    gates = ad.mul(ad.tanh(ad.matmul(Var(h), Var(V))),
                   ad.sigmoid(ad.matmul(Var(h), Var(U))))
    raw = ad.transpose(ad.matmul(gates, Var(w)))
    weights = ad.softmax(raw, axis=-1)
    return weights.data, raw.data


def pool(h, weights):
    """Convex combination of instance embeddings: rep = sum_k weights_k h_k."""
    h = np.asarray(h, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    single = weights.ndim == 1
    if single:
        weights = weights[None, :]
    if weights.shape[1] != h.shape[0]:
        raise ShapeMismatch(
            f"{weights.shape[1]} weights vs {h.shape[0]} instances")
    rep = weights @ h
    return rep[0] if single else rep


def clam_forward(features, config, rng=None):
    """One-shot functional forward (fresh model unless rng pins the init)."""
    model = ClamModel(config, rng=rng)
    return model.predict(features)


def clam_loss(model, features, label, train=False, rng=None):
    """Forward + loss in one call; returns (total, bag_ce, instance_svm)."""
    fwd = model.forward(features, train=train, rng=rng)
    total, bag_ce, inst = model.loss(fwd, label)
    return float(total.data), bag_ce, inst
