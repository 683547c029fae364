"""Experiment grid: source SD model, then SD / OL / OL+LN systems per size.

One sweep trains a source model once, builds one target corpus per target
distance, and for every ``(distance, size, seed)`` cell trains or adapts
each requested system on the same adaptation subset. Every system is scored
on the target speaker's validation split.

Configs are INI files (see ``ExperimentConfig.from_ini``); reports are a
tidy CSV plus a Markdown summary with median tables and trend checks.
"""
import configparser
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from .adapters import AdapterKind
from .corpus import make_speaker, synthesize_corpus
from .errors import ConfigError, LnAdaptError
from .model import DEFAULT_POLICY, ModelConfig
from .training import TrainConfig, adapt, evaluate, train_sd

log = logging.getLogger(__name__)

SYSTEMS = ("SD", "OL", "OL+Full-LN", "OL+LRPD-LN")
ADAPTED = ("OL", "OL+Full-LN", "OL+LRPD-LN")
CSV_HEADER = "distance,system,n_adapt,seed,mcd,f0_rmse,uv_err,mse,n_frames,status"
METRICS = (("mse", "overall MSE"), ("mcd", "MCD (dB)"), ("f0_rmse", "F0 RMSE (Hz)"), ("uv_err", "U/V error"))


def _ints(text):
    return tuple(int(x) for x in _words(text))


def _floats(text):
    return tuple(float(x) for x in _words(text))


def _words(text):
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


# section -> {key: (attribute, parser)}
_INI = {
    "source": {
        "seed": ("source_seed", int),
        "distance": ("source_distance", float),
        "n_utts": ("source_utts", int),
        "corpus_seed": ("source_corpus_seed", int),
        "epochs": ("source_epochs", int),
        "train_seed": ("source_train_seed", int),
    },
    "target": {
        "seed": ("target_seed", int),
        "distances": ("distances", _floats),
        "pool": ("target_pool", int),
        "corpus_seed": ("target_corpus_seed", int),
        "n_valid": ("n_valid", int),
        "n_test": ("n_test", int),
    },
    "grid": {
        "sizes": ("sizes", _ints),
        "systems": ("systems", _words),
        "seeds": ("seeds", _ints),
    },
    "train": {
        "epochs": ("epochs", int),
        "patience": ("patience", int),
        "clip_norm": ("clip_norm", float),
        "sd_learning_rate": ("sd_learning_rate", float),
        "sd_lr_decay": ("sd_lr_decay", float),
        "adapt_learning_rate": ("adapt_learning_rate", float),
        "adapt_lr_decay": ("adapt_lr_decay", float),
    },
    "adapt": {
        "rank": ("rank", int),
        "policy": ("policy", _words),
    },
    "model": {
        "dense_width": ("dense_width", int),
        "blstm_widths": ("blstm_widths", _ints),
    },
}


def _fmt(v):
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


@dataclass
class ExperimentConfig:
    source_seed: int = 1
    source_distance: float = 0.0
    source_utts: int = 1000
    source_corpus_seed: int = 11
    source_epochs: int = 30
    source_train_seed: int = 0
    target_seed: int = 2
    distances: tuple = (0.2, 0.8)
    target_pool: int = 200
    target_corpus_seed: int = 22
    n_valid: int = 40
    n_test: int = 20
    sizes: tuple = (10, 20, 40, 100, 200)
    systems: tuple = SYSTEMS
    seeds: tuple = (0, 1, 2, 3, 4)
    epochs: int = 30
    patience: int = 10
    clip_norm: float = 5.0
    sd_learning_rate: float = 0.1
    sd_lr_decay: float = 0.98
    adapt_learning_rate: float = 0.5
    adapt_lr_decay: float = 0.9
    rank: int = 10
    policy: tuple = DEFAULT_POLICY
    dense_width: int = 32
    blstm_widths: tuple = (32, 32)

    def validate(self):
        if not self.sizes or any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ConfigError(f"sizes must be non-empty and strictly increasing, got {self.sizes}")
        if self.sizes[0] < 1 or self.sizes[-1] > self.target_pool:
            raise ConfigError(f"sizes must lie in [1, target pool {self.target_pool}], got {self.sizes}")
        if not self.systems:
            raise ConfigError("at least one system is required")
        bad = [s for s in self.systems if s not in SYSTEMS]
        if bad or len(set(self.systems)) != len(self.systems):
            raise ConfigError(f"systems must be distinct names from {SYSTEMS}, got {self.systems}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.distances or any(not 0.0 <= d <= 1.0 for d in self.distances):
            raise ConfigError(f"target distances must be in [0, 1], got {self.distances}")
        if len(set(self.distances)) != len(self.distances):
            raise ConfigError(f"target distances must be distinct, got {self.distances}")
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        self.model_config().validate()
        self.sd_train_config(0).validate()
        self.adapt_train_config(0).validate()
        return self

    def model_config(self):
        return ModelConfig(dense_width=self.dense_width, blstm_widths=tuple(self.blstm_widths))

    def sd_train_config(self, seed, epochs=None):
        return TrainConfig(
            learning_rate=self.sd_learning_rate,
            epochs=self.epochs if epochs is None else epochs,
            lr_decay=self.sd_lr_decay,
            seed=seed,
            early_stop_patience=self.patience,
            clip_norm=self.clip_norm,
        )

    def adapt_train_config(self, seed):
        return TrainConfig(
            learning_rate=self.adapt_learning_rate,
            epochs=self.epochs,
            lr_decay=self.adapt_lr_decay,
            seed=seed,
            early_stop_patience=self.patience,
            clip_norm=self.clip_norm,
        )

    @classmethod
    def from_ini(cls, text):
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"malformed config: {e}") from None
        kwargs = {}
        for section in parser.sections():
            if section not in _INI:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in _INI[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                attr, conv = _INI[section][key]
                try:
                    kwargs[attr] = conv(raw)
                except ValueError:
                    raise ConfigError(f"bad value for {key} in [{section}]: {raw!r}") from None
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as f:
                return cls.from_ini(f.read())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None

    def to_ini(self):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        lines = []
        for section, keys in _INI.items():
            lines.append(f"[{section}]")
            for key, (attr, _) in keys.items():
                lines.append(f"{key} = {_fmt(values[attr])}")
            lines.append("")
        return "\n".join(lines)


def select_adaptation_ids(pool, n, seed):
    """Seeded subset of ``n`` ids from ``pool``, kept in pool order.

    The same ``(n, seed)`` picks the same utterances for every system.
    """
    if not 1 <= n <= len(pool):
        raise ConfigError(f"cannot pick {n} adaptation utterances from a pool of {len(pool)}")
    picked = np.random.default_rng([int(seed), int(n)]).choice(len(pool), size=n, replace=False)
    return [pool[i] for i in sorted(picked)]


def source_corpus(cfg):
    spk = make_speaker(cfg.source_seed, cfg.source_distance, cfg.model_config())
    n = cfg.source_utts + cfg.n_valid + cfg.n_test
    return synthesize_corpus(spk, n, cfg.source_corpus_seed, cfg.n_valid, cfg.n_test)


def target_corpus(cfg, distance):
    spk = make_speaker(cfg.target_seed, distance, cfg.model_config())
    n = cfg.target_pool + cfg.n_valid + cfg.n_test
    return synthesize_corpus(spk, n, cfg.target_corpus_seed, cfg.n_valid, cfg.n_test)


def train_source(cfg):
    corpus = source_corpus(cfg)
    tcfg = cfg.sd_train_config(cfg.source_train_seed, epochs=cfg.source_epochs)
    model, rec = train_sd(cfg.model_config(), corpus, tcfg)
    model.norm_stats_ref = f"corpus:{corpus.manifest_hash()}"
    return model, rec


def run_cell(cfg, source, corpus, system, ids, seed):
    """Train or adapt one system on ``ids`` and score it on validation."""
    if system == "SD":
        model, _ = train_sd(cfg.model_config(), corpus, cfg.sd_train_config(seed), train_ids=ids)
    else:
        kind = {"OL": None, "OL+Full-LN": AdapterKind.full(), "OL+LRPD-LN": AdapterKind.lrpd(cfg.rank)}[system]
        model, _ = adapt(source, corpus, kind, tuple(cfg.policy), cfg.adapt_train_config(seed), train_ids=ids)
    return evaluate(model, corpus, "valid")


@dataclass
class SweepRow:
    distance: float
    system: str
    n_adapt: int
    seed: int
    report: object = None
    error: str = ""

    @property
    def ok(self):
        return self.report is not None

    def csv_row(self):
        head = f"{self.distance!r},{self.system},{self.n_adapt},{self.seed}"
        if not self.ok:
            return head + ",,,,,," + "error: " + self.error.replace(",", ";").replace("\n", " ")
        r = self.report
        vals = (r.mcd, r.f0_rmse, r.uv_error, r.overall_mse)
        return head + "," + ",".join(repr(float(v)) for v in vals) + f",{int(r.n_frames)},ok"


@dataclass
class TrendCheck:
    name: str
    distance: object
    status: str
    detail: str

    @property
    def line(self):
        where = "" if self.distance is None else f" [distance {self.distance!r}]"
        return f"{self.status} {self.name}{where}: {self.detail}"


@dataclass
class SweepReport:
    cfg: ExperimentConfig
    rows: list
    checks: list = field(default_factory=list)

    def median(self, distance, system, size, metric="mse"):
        vals = []
        for r in self.rows:
            if (r.distance, r.system, r.n_adapt) != (distance, system, size):
                continue
            if not r.ok:
                return None
            rep = r.report
            vals.append({"mse": rep.overall_mse, "mcd": rep.mcd, "f0_rmse": rep.f0_rmse, "uv_err": rep.uv_error}[metric])
        return float(np.median(vals)) if vals else None

    @property
    def failed(self):
        return any(not r.ok for r in self.rows) or any(c.status == "FAIL" for c in self.checks)

    def to_csv(self):
        return "\n".join([CSV_HEADER] + [r.csv_row() for r in self.rows]) + "\n"

    def to_markdown(self):
        cfg = self.cfg
        out = ["# Adaptation sweep", ""]
        out.append(
            f"Source speaker seed {cfg.source_seed} (distance {cfg.source_distance!r}), "
            f"{cfg.source_utts} training utterances. Target speaker seed {cfg.target_seed}, "
            f"pool {cfg.target_pool}, {cfg.n_valid} validation utterances. "
            f"Seeds: {_fmt(tuple(cfg.seeds))}. Values are medians over seeds on the validation split."
        )
        out.append("")
        for d in cfg.distances:
            out.append(f"## Target distance {d!r}")
            out.append("")
            for metric, title in METRICS:
                out.append(f"### {title}")
                out.append("")
                out.append("| system | " + " | ".join(str(n) for n in cfg.sizes) + " |")
                out.append("|---|" + "---:|" * len(cfg.sizes))
                for s in cfg.systems:
                    cells = []
                    for n in cfg.sizes:
                        m = self.median(d, s, n, metric)
                        cells.append("error" if m is None else f"{m:.4f}")
                    out.append(f"| {s} | " + " | ".join(cells) + " |")
                out.append("")
        out.append("## Trend checks")
        out.append("")
        for c in self.checks:
            out.append(f"- {c.line}")
        errors = [r for r in self.rows if not r.ok]
        if errors:
            out.append("")
            out.append("## Failed runs")
            out.append("")
            for r in errors:
                out.append(f"- {r.system} n={r.n_adapt} seed={r.seed} distance={r.distance!r}: {r.error}")
        out.append("")
        return "\n".join(out)


def _status(ok):
    return "PASS" if ok else "FAIL"


def trend_checks(report):
    """Trend checks on median validation MSE, per distance and across distances."""
    cfg = report.cfg
    sizes = cfg.sizes
    small, large = sizes[0], sizes[-1]
    has = set(cfg.systems)
    checks = []
    for d in cfg.distances:
        med = lambda s, n: report.median(d, s, n)

        adapted = [s for s in ADAPTED if s in has]
        if "SD" in has and adapted:
            bad = [
                f"{s}@{n}"
                for s in adapted
                for n in sizes
                if med(s, n) is None or med("SD", n) is None or not med(s, n) < med("SD", n)
            ]
            detail = "every adaptation system below SD at every size" if not bad else "not below SD: " + ", ".join(bad)
            checks.append(TrendCheck("adaptation_beats_sd", d, _status(not bad), detail))
        else:
            checks.append(TrendCheck("adaptation_beats_sd", d, "SKIP", "needs SD and an adaptation system"))

        if {"OL", "OL+Full-LN"} <= has and len(sizes) > 1:
            vals = [med("OL", small), med("OL+Full-LN", small), med("OL", large), med("OL+Full-LN", large)]
            if None in vals:
                checks.append(TrendCheck("ol_gap_grows", d, "FAIL", "missing medians"))
            else:
                g_small, g_large = vals[0] - vals[1], vals[2] - vals[3]
                checks.append(
                    TrendCheck(
                        "ol_gap_grows",
                        d,
                        _status(g_large > g_small),
                        f"OL - OL+Full-LN gap {g_small:.4f} at {small}, {g_large:.4f} at {large}",
                    )
                )
        else:
            checks.append(TrendCheck("ol_gap_grows", d, "SKIP", "needs OL, OL+Full-LN and two sizes"))

        if {"OL+Full-LN", "OL+LRPD-LN"} <= has and len(sizes) > 1:
            f_s, l_s = med("OL+Full-LN", small), med("OL+LRPD-LN", small)
            f_l, l_l = med("OL+Full-LN", large), med("OL+LRPD-LN", large)
            if None in (f_s, l_s, f_l, l_l):
                checks.append(TrendCheck("lrpd_small_full_large", d, "FAIL", "missing medians"))
            else:
                ok = l_s <= f_s and f_l <= l_l
                checks.append(
                    TrendCheck(
                        "lrpd_small_full_large",
                        d,
                        _status(ok),
                        f"at {small}: LRPD {l_s:.4f} vs Full {f_s:.4f}; at {large}: Full {f_l:.4f} vs LRPD {l_l:.4f}",
                    )
                )
        else:
            checks.append(TrendCheck("lrpd_small_full_large", d, "SKIP", "needs both LN systems and two sizes"))

    ds = sorted(cfg.distances)
    for lo, hi in zip(ds, ds[1:]):
        bad = []
        for s in cfg.systems:
            a, b = report.median(lo, s, small), report.median(hi, s, small)
            if a is None or b is None or not b >= a:
                bad.append(f"{s} ({'n/a' if a is None else f'{a:.4f}'} -> {'n/a' if b is None else f'{b:.4f}'})")
        detail = f"every system at least as bad at {hi!r} as at {lo!r} with {small} utterances"
        checks.append(
            TrendCheck(
                "harder_task_is_harder",
                None,
                _status(not bad),
                detail if not bad else f"easier at {hi!r} than {lo!r} for: " + ", ".join(bad),
            )
        )
    return checks


_WORKER = {}


def _init_worker(cfg, source, corpus):
    _WORKER.update(cfg=cfg, source=source, corpus=corpus)


def _cell_task(args):
    system, ids, seed = args
    try:
        return run_cell(_WORKER["cfg"], _WORKER["source"], _WORKER["corpus"], system, ids, seed), ""
    except LnAdaptError as e:
        return None, str(e)


def run_sweep(cfg, source=None, threads=1, progress=None):
    """Run the full grid and return a ``SweepReport`` in config order.

    ``source`` may be a pre-trained source model; otherwise one is trained
    from the config. ``threads > 1`` runs cells in worker processes; the
    report is identical either way.
    """
    cfg.validate()
    if source is None:
        log.info("training source model on %d utterances", cfg.source_utts)
        source, _ = train_source(cfg)
    rows = []
    for d in cfg.distances:
        corpus = target_corpus(cfg, d)
        pool = corpus.splits["train"]
        cells = []
        for system in cfg.systems:
            for n in cfg.sizes:
                for seed in cfg.seeds:
                    cells.append((system, select_adaptation_ids(pool, n, seed), seed))
        if threads > 1:
            with ProcessPoolExecutor(threads, initializer=_init_worker, initargs=(cfg, source, corpus)) as ex:
                results = list(ex.map(_cell_task, cells))
        else:
            _init_worker(cfg, source, corpus)
            results = []
            for c in cells:
                results.append(_cell_task(c))
                if progress:
                    progress(d, c[0], len(c[1]), c[2], results[-1])
        for (system, ids, seed), (rep, err) in zip(cells, results):
            if err:
                log.error("%s n=%d seed=%d distance=%r failed: %s", system, len(ids), seed, d, err)
            rows.append(SweepRow(d, system, len(ids), seed, rep, err))
    report = SweepReport(cfg, rows)
    report.checks = trend_checks(report)
    return report
