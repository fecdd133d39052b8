"""Word-level and character-level CNN binary classifiers, one per code.

The architecture is a sequence of embeddings, parallel varying-width 1-d
convolutions with ReLU and max-over-time pooling, and an MLP with one hidden
layer and a 2-way softmax. After training, the post-ReLU hidden activation is
the text feature vector; the softmax layer plays no part in feature
extraction.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .base import BaseEstimator, TrainingError, ValidationError, rng_from_seed
from .lingfeat import tokenize

logger = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1

_LEVEL_DEFAULTS = {
    "word": {"emb_dim": 300, "max_len": 64},
    "char": {"emb_dim": 100, "max_len": 280},
}


@dataclass(frozen=True)
class TextCnnConfig:
    level: str = "word"
    emb_dim: int | None = None  # word: 300, char: 100
    filter_widths: tuple = (1, 2, 3, 4, 5)
    maps_per_width: int = 100
    hidden_dim: int = 100
    dropout: float = 0.5
    lr: float = 0.002
    max_len: int | None = None  # word: 64, char: 280
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    val_fraction: float = 0.1
    seed: int = 0

    def resolved(self):
        if self.level not in _LEVEL_DEFAULTS:
            raise ValidationError(f"level must be 'word' or 'char', got {self.level!r}")
        defaults = _LEVEL_DEFAULTS[self.level]
        cfg = replace(
            self,
            emb_dim=self.emb_dim or defaults["emb_dim"],
            max_len=self.max_len or defaults["max_len"],
            filter_widths=tuple(self.filter_widths),
        )
        for name in ("emb_dim", "maps_per_width", "hidden_dim", "max_len", "batch_size"):
            if getattr(cfg, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if any(w <= 0 for w in cfg.filter_widths):
            raise ValidationError("filter widths must be positive")
        if cfg.max_len < max(cfg.filter_widths):
            raise ValidationError("max_len must reach the widest filter")
        if not 0.0 <= cfg.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        return cfg


def load_embeddings(path, expected_dim=None):
    """Read a text embedding table: one `token v1 ... vD` line per token.

    Returns None (with a warning) when the file is missing, so word-level
    training can fall back to random initialization.
    """
    if path is None:
        return None
    if not os.path.exists(path):
        logger.warning("embedding file %s not found; using random initialization", path)
        return None
    table = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            token = parts[0]
            vec = np.asarray([float(v) for v in parts[1:]], dtype=np.float64)
            if expected_dim is not None and vec.size != expected_dim:
                raise ValidationError(
                    f"{path}:{lineno}: embedding dim {vec.size} != expected {expected_dim}"
                )
            table[token] = vec
    return table


def _units(text, level):
    if level == "word":
        return [t.surface for t in tokenize(text)]
    return list(text)


@dataclass
class TextCnn(BaseEstimator):
    """Estimator-style CNN text classifier for one binary code.

    fit(tweets, y) builds the unit vocabulary from the training tweets,
    trains with Nadam and early stopping on a user-grouped holdout, and
    restores the best checkpoint. transform()/extract_features() return the
    100-d post-ReLU hidden activations; predict_proba() the positive-class
    softmax probability.
    """

    config: TextCnnConfig = field(default_factory=TextCnnConfig)
    embeddings: dict | None = None

    def fit(self, tweets, y, groups=None):
        cfg = self.config.resolved()
        y = np.asarray(y, dtype=np.int64)
        if np.unique(y).size < 2:
            raise TrainingError("training data contains a single class")
        if len(tweets) != y.shape[0]:
            raise ValidationError("tweets and labels have different lengths")

        init_rng = rng_from_seed(cfg.seed)
        shuffle_rng = rng_from_seed(cfg.seed + 1)
        drop_rng = rng_from_seed(cfg.seed + 2)

        self.vocab_ = self._build_vocab(tweets, cfg)
        self._init_params(cfg, init_rng)
        ids, lengths = self._encode_batch(tweets, cfg)

        if groups is None:
            groups = [t.user_id for t in tweets]
        train_idx, val_idx = self._grouped_holdout(groups, y, cfg, init_rng)
        self.holdout_users_ = sorted({groups[i] for i in val_idx})

        params = self._param_list()
        optimizer = nn.Nadam(params, lr=cfg.lr)
        best_val = np.inf
        best_state = {p.name: p.data.copy() for p in params}
        best_epoch = 0
        stale = 0
        for epoch in range(1, cfg.max_epochs + 1):
            order = train_idx[shuffle_rng.permutation(train_idx.size)]
            for start in range(0, order.size, cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                optimizer.zero_grad()
                _, logits = self._forward(ids[batch], lengths[batch], "train", drop_rng, cfg)
                loss = nn.softmax_xent(logits, y[batch])
                loss.backward()
                if self.emb_.grad is not None:
                    self.emb_.grad[PAD_ID] = 0.0
                optimizer.step()
                self.emb_.data[PAD_ID] = 0.0

            val_loss = self._mean_loss(ids[val_idx], lengths[val_idx], y[val_idx], cfg)
            if val_loss < best_val - 1e-12:
                best_val = val_loss
                best_state = {p.name: p.data.copy() for p in params}
                best_epoch = epoch
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        for p in params:
            p.data = best_state[p.name].copy()
        self.stopped_epoch_ = best_epoch
        self.best_val_loss_ = float(best_val)
        self.config_ = cfg
        return self

    # -- architecture ------------------------------------------------------

    def _build_vocab(self, tweets, cfg):
        units = set()
        for t in tweets:
            units.update(_units(t.text, cfg.level))
        vocab = {"<pad>": PAD_ID, "<unk>": UNK_ID}
        for u in sorted(units):
            vocab[u] = len(vocab)
        return vocab

    def _init_params(self, cfg, rng):
        vocab_size = len(self.vocab_)
        emb = rng.uniform(-0.25, 0.25, size=(vocab_size, cfg.emb_dim))
        if cfg.level == "word" and self.embeddings:
            for token, idx in self.vocab_.items():
                vec = self.embeddings.get(token)
                if vec is not None:
                    if vec.size != cfg.emb_dim:
                        raise ValidationError(
                            f"pretrained embedding dim {vec.size} != emb_dim {cfg.emb_dim}"
                        )
                    emb[idx] = vec
        emb[PAD_ID] = 0.0
        self.emb_ = nn.Tensor(emb, requires_grad=True, name="emb")

        self.conv_filters_ = []
        self.conv_biases_ = []
        for w in cfg.filter_widths:
            limit = np.sqrt(6.0 / (w * cfg.emb_dim + cfg.maps_per_width))
            filt = rng.uniform(-limit, limit, size=(w, cfg.emb_dim, cfg.maps_per_width))
            self.conv_filters_.append(nn.Tensor(filt, requires_grad=True, name=f"conv{w}_w"))
            self.conv_biases_.append(
                nn.Tensor(np.zeros(cfg.maps_per_width), requires_grad=True, name=f"conv{w}_b")
            )
        concat_dim = len(cfg.filter_widths) * cfg.maps_per_width
        lim1 = np.sqrt(6.0 / (concat_dim + cfg.hidden_dim))
        self.w1_ = nn.Tensor(
            rng.uniform(-lim1, lim1, size=(concat_dim, cfg.hidden_dim)),
            requires_grad=True,
            name="w1",
        )
        self.b1_ = nn.Tensor(np.zeros(cfg.hidden_dim), requires_grad=True, name="b1")
        lim2 = np.sqrt(6.0 / (cfg.hidden_dim + 2))
        self.w2_ = nn.Tensor(
            rng.uniform(-lim2, lim2, size=(cfg.hidden_dim, 2)), requires_grad=True, name="w2"
        )
        self.b2_ = nn.Tensor(np.zeros(2), requires_grad=True, name="b2")

    def _param_list(self):
        return [self.emb_, *self.conv_filters_, *self.conv_biases_, self.w1_, self.b1_, self.w2_, self.b2_]

    def encode(self, text, cfg=None):
        cfg = cfg or self.config_
        units = _units(text, cfg.level)[: cfg.max_len]
        ids = np.full(cfg.max_len, PAD_ID, dtype=np.int64)
        for i, u in enumerate(units):
            ids[i] = self.vocab_.get(u, UNK_ID)
        return ids, len(units)

    def _encode_batch(self, tweets, cfg=None):
        cfg = cfg or self.config_
        ids = np.full((len(tweets), cfg.max_len), PAD_ID, dtype=np.int64)
        lengths = np.zeros(len(tweets), dtype=np.int64)
        for i, t in enumerate(tweets):
            ids[i], lengths[i] = self.encode(t.text, cfg)
        return ids, lengths

    def _forward(self, ids, lengths, mode, drop_rng, cfg=None):
        cfg = cfg or self.config_
        emb = nn.embedding(self.emb_, ids)
        emb = nn.dropout(emb, cfg.dropout, mode, drop_rng)
        pooled = [
            nn.conv1d_maxpool(emb, filt, bias, lengths=lengths)
            for filt, bias in zip(self.conv_filters_, self.conv_biases_)
        ]
        feat = pooled[0] if len(pooled) == 1 else nn.concat(pooled, axis=-1)
        feat = nn.dropout(feat, cfg.dropout, mode, drop_rng)
        hidden = nn.relu(nn.dense(feat, self.w1_, self.b1_))
        logits = nn.dense(hidden, self.w2_, self.b2_)
        return hidden, logits

    def _mean_loss(self, ids, lengths, y, cfg=None, chunk=256):
        total, count = 0.0, 0
        for start in range(0, ids.shape[0], chunk):
            sl = slice(start, start + chunk)
            _, logits = self._forward(ids[sl], lengths[sl], "eval", None, cfg)
            loss = nn.softmax_xent(logits, y[sl])
            n = ids[sl].shape[0]
            total += float(loss.data) * n
            count += n
        return total / max(count, 1)

    def _grouped_holdout(self, groups, y, cfg, rng):
        """Reserve ~val_fraction of tweets for early stopping, whole users at
        a time, keeping both classes in the remaining training set."""
        users = sorted(set(groups))
        order = [users[i] for i in rng.permutation(len(users))]
        counts = {u: 0 for u in users}
        for g in groups:
            counts[g] += 1
        target = max(1, int(round(cfg.val_fraction * len(groups))))
        val_users = []
        taken = 0
        for u in order:
            if taken >= target or len(val_users) >= len(users) - 1:
                break
            val_users.append(u)
            taken += counts[u]

        while val_users:
            val_set = set(val_users)
            train_idx = np.array([i for i, g in enumerate(groups) if g not in val_set])
            if np.unique(y[train_idx]).size == 2:
                break
            val_users.pop()  # give users back until training keeps both classes
        if not val_users:
            raise TrainingError("cannot carve a validation holdout that keeps both classes")
        val_set = set(val_users)
        train_idx = np.array([i for i, g in enumerate(groups) if g not in val_set])
        val_idx = np.array([i for i, g in enumerate(groups) if g in val_set])
        return train_idx, val_idx

    # -- inference ---------------------------------------------------------

    def extract_features(self, tweets):
        """Post-ReLU hidden activations, dropout disabled; (n, hidden_dim)."""
        ids, lengths = self._encode_batch(tweets)
        out = np.zeros((len(tweets), self.config_.hidden_dim))
        for start in range(0, ids.shape[0], 256):
            sl = slice(start, start + 256)
            hidden, _ = self._forward(ids[sl], lengths[sl], "eval", None)
            out[sl] = hidden.data
        return out

    transform = extract_features

    def predict_proba(self, tweets):
        """Positive-class softmax probability per tweet."""
        ids, lengths = self._encode_batch(tweets)
        out = np.zeros(len(tweets))
        for start in range(0, ids.shape[0], 256):
            sl = slice(start, start + 256)
            _, logits = self._forward(ids[sl], lengths[sl], "eval", None)
            out[sl] = nn.softmax(logits.data)[:, 1]
        return out

    def logits(self, tweets):
        ids, lengths = self._encode_batch(tweets)
        _, logits = self._forward(ids, lengths, "eval", None)
        return logits.data

    # -- persistence -------------------------------------------------------

    def param_arrays(self):
        return {p.name: p.data for p in self._param_list()}

    def state_dict(self):
        return {
            "params": self.param_arrays(),
            "vocab": sorted(self.vocab_),
            "stopped_epoch": self.stopped_epoch_,
            "holdout_users": self.holdout_users_,
        }

    def save(self, path, meta=None):
        cfg = self.config_
        header_meta = {
            "vocab": sorted(self.vocab_, key=self.vocab_.get),
            "config": {
                "level": cfg.level,
                "emb_dim": cfg.emb_dim,
                "filter_widths": list(cfg.filter_widths),
                "maps_per_width": cfg.maps_per_width,
                "hidden_dim": cfg.hidden_dim,
                "dropout": cfg.dropout,
                "lr": cfg.lr,
                "max_len": cfg.max_len,
                "batch_size": cfg.batch_size,
                "max_epochs": cfg.max_epochs,
                "patience": cfg.patience,
                "val_fraction": cfg.val_fraction,
                "seed": cfg.seed,
            },
            "stopped_epoch": self.stopped_epoch_,
            "holdout_users": self.holdout_users_,
        }
        if meta:
            header_meta.update(meta)
        nn.save_checkpoint(path, self.param_arrays(), meta=header_meta)

    @classmethod
    def load(cls, path):
        arrays, meta = nn.load_checkpoint(path, with_meta=True)
        cfg_dict = dict(meta["config"])
        cfg_dict["filter_widths"] = tuple(cfg_dict["filter_widths"])
        cfg = TextCnnConfig(**cfg_dict).resolved()
        model = cls(config=cfg)
        model.config_ = cfg
        model.vocab_ = {tok: i for i, tok in enumerate(meta["vocab"])}
        model.emb_ = nn.Tensor(arrays["emb"].copy(), requires_grad=True, name="emb")
        model.conv_filters_ = []
        model.conv_biases_ = []
        for w in cfg.filter_widths:
            model.conv_filters_.append(
                nn.Tensor(arrays[f"conv{w}_w"].copy(), requires_grad=True, name=f"conv{w}_w")
            )
            model.conv_biases_.append(
                nn.Tensor(arrays[f"conv{w}_b"].copy(), requires_grad=True, name=f"conv{w}_b")
            )
        model.w1_ = nn.Tensor(arrays["w1"].copy(), requires_grad=True, name="w1")
        model.b1_ = nn.Tensor(arrays["b1"].copy(), requires_grad=True, name="b1")
        model.w2_ = nn.Tensor(arrays["w2"].copy(), requires_grad=True, name="w2")
        model.b2_ = nn.Tensor(arrays["b2"].copy(), requires_grad=True, name="b2")
        model.stopped_epoch_ = meta["stopped_epoch"]
        model.holdout_users_ = meta["holdout_users"]
        return model
