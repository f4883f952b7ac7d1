"""Training loop: balanced sampling, Adam / Lookahead, early stopping.

Determinism contract: given (model_seed, data, config) the run is
bit-reproducible. Three independent PRNG streams are derived from
model_seed (initialization, sampling, dropout), so the data split — owned
by bagio.make_split under data_seed — never shifts when model_seed changes,
and vice versa.
"""

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .attnmil import ClamModel
from .errors import EmptyClass, NonFiniteLoss
from .transmil import TransmilModel

MODEL_FAMILIES = ("clam_sb", "clam_mb", "transmil")


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 1e-5
    max_epochs: int = 200
    min_epochs: int = 50
    patience: int = 20
    batch_size: int = 1
    optimizer: str = "adam"          # "adam" | "lookahead_adam"
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    model_seed: int = 0

    def validate(self):
        if self.min_epochs > self.max_epochs:
            raise ValueError("min_epochs must be <= max_epochs")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size != 1:
            raise ValueError("batch_size must be 1 (bags are ragged)")
        if self.optimizer not in ("adam", "lookahead_adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not (0 < self.lookahead_alpha <= 1) or self.lookahead_k < 1:
            raise ValueError("need lookahead_k >= 1 and 0 < alpha <= 1")

    def to_dict(self):
        return dict(self.__dict__)


class Adam:
    """Adam with classic L2 weight decay folded into the gradient."""

    def __init__(self, params, lr=2e-4, weight_decay=1e-5,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                grad = grad + self.weight_decay * p.data
            self.m[name] = b1 * self.m[name] + (1 - b1) * grad
            self.v[name] = b2 * self.v[name] + (1 - b2) * grad * grad
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class Lookahead:
    """Slow/fast weight wrapper: every k inner steps, slow += alpha*(fast-slow)
    and the fast weights are reset to slow."""

    def __init__(self, inner, k=5, alpha=0.5):
        if k < 1 or not (0 < alpha <= 1):
            raise ValueError("need k >= 1 and 0 < alpha <= 1")
        self.inner = inner
        self.k = k
        self.alpha = alpha
        self.count = 0
        self.slow = {name: p.data.copy() for name, p in inner.params.items()}

    def zero_grad(self):
        self.inner.zero_grad()

    def step(self):
        self.inner.step()
        self.count += 1
        if self.count % self.k == 0:
            for name, p in self.inner.params.items():
                self.slow[name] += self.alpha * (p.data - self.slow[name])
                p.data[...] = self.slow[name]


def lookahead_step(lookahead):
    """One wrapped optimizer step (see Lookahead)."""
    lookahead.step()


class BalancedSampler:
    """Class-balanced multinomial slide sampler.

    Each slide of class c carries weight 1/count(c); normalized, every class
    is drawn with probability 1/C regardless of its slide count.
    """

    def __init__(self, labels, num_classes=None):
        self.labels = np.asarray(labels, dtype=np.intp)
        if self.labels.size == 0:
            raise EmptyClass("empty train split")
        c = num_classes if num_classes is not None else int(self.labels.max()) + 1
        counts = np.bincount(self.labels, minlength=c)
        missing = np.nonzero(counts == 0)[0]
        if missing.size:
            raise EmptyClass(f"classes {missing.tolist()} have no train slides")
        self.weights = 1.0 / counts[self.labels]
        self.probabilities = self.weights / self.weights.sum()

    def draw(self, rng):
        """One slide index, i.i.d. with replacement."""
        return int(rng.choice(self.labels.size, p=self.probabilities))

    def draw_epoch(self, rng, size=None):
        """One epoch worth of indices (default: one per training slide)."""
        size = size if size is not None else self.labels.size
        return rng.choice(self.labels.size, size=size, replace=True,
                          p=self.probabilities)


def make_sampler(labels, num_classes=None):
    return BalancedSampler(labels, num_classes=num_classes)


class EarlyStopper:
    """Min-epochs gate + patience on strict validation-loss improvement."""

    def __init__(self, min_epochs=50, patience=20, max_epochs=200):
        self.min_epochs = min_epochs
        self.patience = patience
        self.max_epochs = max_epochs
        self.best = np.inf
        self.since_improvement = 0

    def update(self, epoch, val_loss):
        """Feed the epoch's validation loss (epoch is 1-based).

        Returns:
            (improved, stop): improved means strictly lower than the best so
            far; stop means training should end after this epoch.
        """
        improved = val_loss < self.best
        if improved:
            self.best = val_loss
            self.since_improvement = 0
        else:
            self.since_improvement += 1
        stop = epoch >= self.max_epochs or (
            epoch >= self.min_epochs
            and self.since_improvement >= self.patience)
        return improved, stop


def build_model(family, model_config, rng=None):
    """Instantiate a model for a family name ("clam_sb"|"clam_mb"|"transmil")."""
    if family == "transmil":
        return TransmilModel(model_config, rng=rng)
    if family in ("clam_sb", "clam_mb"):
        mode = "SB" if family == "clam_sb" else "MB"
        if model_config.branch_mode != mode:
            model_config = dataclasses.replace(model_config, branch_mode=mode)
        return ClamModel(model_config, rng=rng)
    raise ValueError(f"unknown model family {family!r}; "
                     f"expected one of {MODEL_FAMILIES}")


def _mean_loss_and_accuracy(model, bags, labels, slide_ids):
    losses, correct = [], 0
    for sid in slide_ids:
        fwd = model.forward(bags[sid].features, train=False)
        total, _, _ = model.loss(fwd, labels[sid])
        losses.append(float(total.data))
        if int(np.argmax(fwd.probs.data[0])) == labels[sid]:
            correct += 1
    return float(np.mean(losses)), correct / len(slide_ids)


def train_model(family, model_config, bags, labels, split, config):
    """Train one model on one split.

    Args:
        family: "clam_sb" | "clam_mb" | "transmil".
        model_config: ClamConfig or TransmilConfig.
        bags: dict slide_id -> FeatureBag covering the split.
        labels: dict slide_id -> class index.
        split: SplitSpec with train/val lists.
        config: TrainConfig (model_seed lives here).

    Returns:
        (model with best-validation weights, log: list of epoch dicts)
    """
    config.validate()
    seed_seq = np.random.SeedSequence(config.model_seed)
    init_rng, sampler_rng, dropout_rng = (
        np.random.default_rng(s) for s in seed_seq.spawn(3))

    model = build_model(family, model_config, rng=init_rng)
    train_ids = list(split.train)
    sampler = make_sampler([labels[sid] for sid in train_ids],
                           num_classes=model.config.num_classes)

    if config.optimizer == "lookahead_adam":
        optimizer = Lookahead(Adam(model.params, lr=config.learning_rate,
                                   weight_decay=config.weight_decay),
                              k=config.lookahead_k,
                              alpha=config.lookahead_alpha)
    else:
        optimizer = Adam(model.params, lr=config.learning_rate,
                         weight_decay=config.weight_decay)

    stopper = EarlyStopper(min_epochs=config.min_epochs,
                           patience=config.patience,
                           max_epochs=config.max_epochs)
    best_state = {k: v.data.copy() for k, v in model.params.items()}
    log = []
    for epoch in range(1, config.max_epochs + 1):
        order = sampler.draw_epoch(sampler_rng)
        epoch_losses = []
        for idx in order:
            sid = train_ids[idx]
            fwd = model.forward(bags[sid].features, train=True,
                                rng=dropout_rng)
            total, _, _ = model.loss(fwd, labels[sid])
            if not np.isfinite(total.data):
                raise NonFiniteLoss(f"non-finite loss on slide {sid} "
                                    f"at epoch {epoch}")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            epoch_losses.append(float(total.data))
        val_loss, val_accuracy = _mean_loss_and_accuracy(
            model, bags, labels, split.val)
        log.append({
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "val_loss": val_loss,
            "val_accuracy": val_accuracy,
            "lr": config.learning_rate,
        })
        improved, stop = stopper.update(epoch, val_loss)
        if improved:
            best_state = {k: v.data.copy() for k, v in model.params.items()}
        if stop:
            break
    for name, value in best_state.items():
        model.params[name].data[...] = value
    return model, log


def write_training_log(log, path):
    """JSON-lines: one {epoch, train_loss, val_loss, val_accuracy, lr} per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in log:
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")
