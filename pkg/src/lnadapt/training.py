"""MSE criterion, masked SGD, and the SD-training / adaptation loops."""
import logging
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterKind
from .errors import ConfigError, NumericError, ShapeError, StateError
from .metrics import MetricsReport, f0_rmse, mcd, overall_mse, uv_error
from .model import DEFAULT_POLICY, STREAMS, build_model, insert_adapters, trainable_mask

log = logging.getLogger(__name__)

# per-utterance loss above this is treated as divergence (targets are unit-variance)
DIVERGENCE_LOSS = 1e4


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 30
    batch: int = 1
    lr_decay: float = 0.98
    seed: int = 0
    early_stop_patience: int = 10
    clip_norm: float = 5.0

    def validate(self, allow_zero_epochs=False):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < (0 if allow_zero_epochs else 1):
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.early_stop_patience < 1:
            raise ConfigError(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        return self


# Tuned on the desk-scale teacher corpora. Adaptation uses a large step with
# fast decay: the heads and adapters start from a trained source model.
SD_DEFAULTS = dict(learning_rate=0.1, lr_decay=0.98)
ADAPT_DEFAULTS = dict(learning_rate=0.5, lr_decay=0.9)


@dataclass
class TrainRecord:
    """Loss history; index 0 is the model before any update."""

    train_loss: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    selected_epoch: int = 0

    def to_csv(self):
        lines = ["epoch,train_loss,valid_loss"]
        for e, (t, v) in enumerate(zip(self.train_loss, self.valid_loss)):
            lines.append(f"{e},{t!r},{v!r}")
        return "\n".join(lines) + "\n"


def mse_loss(preds, targets):
    """Equal-weight mean over streams of per-stream MSE, and its gradient."""
    if set(preds) != set(targets):
        raise ShapeError(f"stream sets differ: {sorted(preds)} vs {sorted(targets)}")
    S = len(preds)
    loss = 0.0
    grads = {}
    for s, p in preds.items():
        t = targets[s]
        if p.shape != t.shape:
            raise ShapeError(f"stream {s}: prediction {p.shape} vs target {t.shape}")
        d = p - t
        if d.size:
            loss += float(np.mean(d * d))
            grads[s] = (2.0 / (S * d.size)) * d
        else:
            grads[s] = np.zeros_like(d)
    return loss / S, grads


def sgd_step(model, grads, mask, lr):
    """In-place ``p -= lr * g`` on blocks whose mask entry is true."""
    blocks = model.blocks()
    todo = [k for k, on in mask.items() if on and k in grads]
    for k in todo:
        if not np.all(np.isfinite(grads[k])):
            raise NumericError(f"non-finite gradient in block {k}")
    if lr == 0:
        return model
    for k in todo:
        blocks[k] -= lr * grads[k]
    return model


def clip_grads(grads, names, max_norm):
    total = np.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in names))
    if max_norm and total > max_norm:
        scale = max_norm / total
        for k in names:
            grads[k] = grads[k] * scale
    return total


def _first_trainable_stage(stages, mask):
    for i, (prefix, layer) in enumerate(stages):
        if any(mask.get(f"{prefix}.{k}") for k in layer.params()):
            return i
    return len(stages)


def _split_loss(model, stages, lo, prefixed):
    preds = {s: [] for s in STREAMS}
    targs = {s: [] for s in STREAMS}
    for h0, t in prefixed:
        out = model._heads(model.run_stages(h0, lo, None, stages))
        for s in STREAMS:
            preds[s].append(out[s])
            targs[s].append(t[s])
    return overall_mse(
        {s: np.concatenate(v) for s, v in preds.items()},
        {s: np.concatenate(v) for s, v in targs.items()},
    )


def fit(model, mask, train, valid, tcfg):
    """Masked SGD over ``train`` with best-validation selection.

    ``train`` and ``valid`` are lists of normalized ``(inputs, targets)``.
    The model is updated in place and ends at its best-validation state.
    """
    if not train or not valid:
        raise ConfigError("training needs non-empty train and validation data")
    stages = model.stages()
    lo = _first_trainable_stage(stages, mask)
    # frozen prefix is deterministic, so compute it once per utterance
    tr = [(model.run_stages(x, 0, lo, stages), t) for x, t in train]
    va = [(model.run_stages(x, 0, lo, stages), t) for x, t in valid]
    names = [k for k, on in mask.items() if on]
    blocks = model.blocks()
    rng = np.random.default_rng(tcfg.seed)

    rec = TrainRecord()
    init_train = [mse_loss(model._heads(model.run_stages(h, lo, None, stages)), t)[0] for h, t in tr]
    rec.train_loss.append(float(np.mean(init_train)))
    rec.valid_loss.append(_split_loss(model, stages, lo, va))
    best = rec.valid_loss[0]
    best_params = {k: blocks[k].copy() for k in names}
    since_best = 0
    lr = tcfg.learning_rate

    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(tr))
        losses = []
        for start in range(0, len(order), tcfg.batch):
            acc = None
            chunk = order[start : start + tcfg.batch]
            for i in chunk:
                h0, t = tr[i]
                out, cache = model.forward_from(h0, lo, stages)
                loss, dout = mse_loss(out, t)
                if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
                    raise NumericError(f"training diverged at epoch {epoch}: utterance loss {loss}")
                losses.append(loss)
                g = model.backward_to(cache, dout, stages)
                if acc is None:
                    acc = {k: g[k] for k in names}
                else:
                    for k in names:
                        acc[k] = acc[k] + g[k]
            if len(chunk) > 1:
                acc = {k: v / len(chunk) for k, v in acc.items()}
            clip_grads(acc, names, tcfg.clip_norm)
            sgd_step(model, acc, mask, lr)
        lr *= tcfg.lr_decay
        rec.train_loss.append(float(np.mean(losses)))
        v = _split_loss(model, stages, lo, va)
        if not np.isfinite(v):
            raise NumericError(f"validation loss is not finite at epoch {epoch}")
        rec.valid_loss.append(v)
        log.debug("epoch %d train %.6f valid %.6f", epoch, rec.train_loss[-1], v)
        if v < best:
            best = v
            rec.selected_epoch = epoch
            best_params = {k: blocks[k].copy() for k in names}
            since_best = 0
        else:
            since_best += 1
            if since_best >= tcfg.early_stop_patience:
                break
    for k in names:
        blocks[k][...] = best_params[k]
    return rec


def _pick(corpus, split, ids):
    if ids is None:
        utts = corpus.split(split)
    else:
        utts = [corpus.utterances[i] for i in ids]
    return [corpus.stats.normalize(u) for u in utts]


def train_sd(cfg, corpus, tcfg, train_ids=None):
    """Train a speaker-dependent model from scratch on the corpus train split."""
    tcfg.validate()
    train = _pick(corpus, "train", train_ids)
    valid = _pick(corpus, "valid", None)
    if not train or not valid:
        raise ConfigError("SD training needs non-empty train and valid splits")
    model = build_model(cfg, seed=tcfg.seed)
    rec = fit(model, trainable_mask(model, "sd"), train, valid, tcfg)
    return model, rec


def adapt(source, corpus, kind, policy=DEFAULT_POLICY, tcfg=None, train_ids=None):
    """Adapt ``source`` to the corpus speaker.

    ``kind=None`` fine-tunes only the output heads. Otherwise adapters of
    ``kind`` are inserted at ``policy`` and trained together with the heads.
    The trunk is never modified.
    """
    tcfg = (tcfg or TrainConfig(**ADAPT_DEFAULTS)).validate(allow_zero_epochs=True)
    if source.adapters():
        raise StateError("source model already carries adapters")
    if kind is None:
        model = source.copy()
        mode = "ol"
    else:
        if not isinstance(kind, AdapterKind):
            raise ConfigError(f"kind must be an AdapterKind or None, got {kind!r}")
        model = insert_adapters(source, policy, kind, seed=tcfg.seed)
        mode = "ol_plus_adapters"
    mask = trainable_mask(model, mode)
    train = _pick(corpus, "train", train_ids)
    valid = _pick(corpus, "valid", None)
    rec = fit(model, mask, train, valid, tcfg)
    src = source.trunk_blocks()
    for k, v in model.trunk_blocks().items():
        if not np.array_equal(v, src[k]):
            raise StateError(f"trunk block {k} changed during adaptation")
    return model, rec


def predict_split(model, utts, stats, oracle=False):
    """Normalized and de-normalized predictions for each utterance."""
    out = []
    for u in utts:
        if oracle:
            norm = stats.normalize_streams(u.targets)
            raw = {s: u.targets[s] for s in STREAMS}
        else:
            norm = model.forward(stats.normalize_inputs(u.inputs))
            raw = stats.denormalize_streams(norm)
        out.append((norm, raw))
    return out


def evaluate(model, corpus, split="valid", oracle=False):
    """All four objective measures of ``model`` on one corpus split.

    With ``oracle=True`` the model is bypassed and the references are used
    as predictions.
    """
    utts = corpus.split(split)
    if not utts:
        raise ConfigError(f"split {split!r} is empty")
    return evaluate_utterances(model, utts, corpus.stats, oracle)


def evaluate_utterances(model, utts, stats, oracle=False):
    preds = predict_split(model, utts, stats, oracle)
    cat = lambda parts: np.concatenate(parts, axis=0)
    norm_p = {s: cat([p[0][s] for p in preds]) for s in STREAMS}
    raw_p = {s: cat([p[1][s] for p in preds]) for s in STREAMS}
    raw_t = {s: cat([u.targets[s] for u in utts]) for s in STREAMS}
    norm_t = stats.normalize_streams(raw_t)
    if oracle:
        norm_p = norm_t
    hyp_uv = raw_p["uv"][:, 0]
    ref_uv = raw_t["uv"][:, 0]
    both = int(np.sum((ref_uv > 0.5) & (hyp_uv > 0.5)))
    return MetricsReport(
        mcd=mcd(raw_t["mcep"], raw_p["mcep"]),
        f0_rmse=f0_rmse(raw_t["lf0"], raw_p["lf0"], ref_uv, hyp_uv),
        uv_error=uv_error(ref_uv, hyp_uv),
        overall_mse=overall_mse(norm_p, norm_t),
        n_frames=int(len(ref_uv)),
        f0_frames=both,
    )
