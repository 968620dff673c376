"""Experiment configuration and the on-disk pipeline behind the CLI.

Layout under an output root::

    data/dataset.jsonl (+ .meta.json)
    pretrain/params.fdra, pretrain/history.csv, pretrain/meta.json
    partition/alpha<a>/shards.json, js_matrix.csv, heterogeneity.json
    runs/<mode>-alpha<a>/rounds.csv, timings.csv, summary.json,
        frozen.fdra, final.fdra, snapshots/round_XXXX.fdra,
        drift.csv, drift/<tensor>.csv

Every stage records a fingerprint of the configuration it was built from;
later stages reuse an artifact only when the fingerprint matches.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import adapters as ad
from . import drift as dr
from . import serialize
from .data import Dataset, SynthConfig, load_csv, load_dataset, load_jsonl, regrouped_signal, save_dataset, synth_generate, train_test_split
from .errors import ConfigError, DataError, NumericError
from .fedsim import FedConfig, RoundReport, comm_cost, run, time_to_target
from .linalg import make_rng
from .model import ModelConfig, evaluate, init_params, train_epochs
from .partition import PartitionConfig, heterogeneity_matrix, partition, read_shards_json, write_matrix_csv, write_shards_json

log = logging.getLogger(__name__)

TARGETS = (0.5, 0.6, 0.7, 0.8, 0.85, 0.9)


# --- configuration ---------------------------------------------------------


@dataclass
class SynthSection:
    num_classes: int = 20
    samples_per_class: int = 250
    vocab_size: int = 1024
    seq_len: int = 16
    signal_tokens_per_class: int = 8
    signal_rate: float = 0.5


@dataclass
class DataSection:
    test_fraction: float = 0.2
    # empty path means the synthetic generator; otherwise a .jsonl or .csv of text/label records
    path: str = ""


@dataclass
class ModelSection:
    embed_dim: int = 32
    ffn_dim: int = 64
    num_blocks: int = 1
    init_std: float = 0.08


@dataclass
class PretrainSection:
    enabled: bool = True
    epochs: int = 30
    lr: float = 0.1
    batch_size: int = 16
    optimizer: str = "sgd"
    # the pretraining task deals the same signal-token pool into finer classes
    num_classes: int = 80
    samples: int = 5000


@dataclass
class PartitionSection:
    num_clients: int = 20
    alpha: float = 0.1


@dataclass
class AdapterSection:
    mode: str = "federa"
    rank: int = 8
    beta: float | None = None
    bottleneck_dim: int = 8
    targets: list = field(default_factory=lambda: ["w_q", "w_v"])


@dataclass
class FedSection:
    rounds: int = 100
    clients_per_round: int = 5
    local_epochs: int = 1
    batch_size: int = 16
    lr: float = 0.1
    lr_by_mode: dict = field(default_factory=lambda: {"fedap": 0.02})
    eval_every: int = 1
    optimizer: str = "sgd"
    snapshot_stride: int = 1


@dataclass
class DriftSection:
    tensors: list = field(default_factory=list)
    effective: bool = False


@dataclass
class SweepSection:
    modes: list = field(default_factory=lambda: ["fedft", "fedbf", "fedap", "fedlr", "federa"])
    alphas: list = field(default_factory=lambda: [0.1, 1.0, 100.0])
    seeds: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs"
    threads: int = 1
    synth: SynthSection = field(default_factory=SynthSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    adapter: AdapterSection = field(default_factory=AdapterSection)
    fed: FedSection = field(default_factory=FedSection)
    drift: DriftSection = field(default_factory=DriftSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "ExperimentConfig":
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        self.synth_config().validate()
        if not 0.0 < self.data.test_fraction < 1.0:
            raise ConfigError(f"data.test_fraction must lie in (0, 1), got {self.data.test_fraction}")
        if self.model.init_std <= 0:
            raise ConfigError("model.init_std must be > 0")
        ModelConfig(self.synth.vocab_size, self.synth.seq_len, self.model.embed_dim, self.model.ffn_dim, self.model.num_blocks, self.synth.num_classes)
        p = self.pretrain
        if p.epochs < 1 or p.batch_size < 1 or p.num_classes < 1 or p.samples < p.num_classes or not p.lr > 0:
            raise ConfigError("pretrain needs epochs, batch_size, num_classes >= 1, samples >= num_classes and lr > 0")
        if p.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"pretrain.optimizer must be 'sgd' or 'adamw', got {p.optimizer!r}")
        PartitionConfig(self.partition.num_clients, self.partition.alpha, self.seed).validate()
        for mode in {self.adapter.mode, *self.sweep.modes}:
            self.mode_for(mode)
            self.fed_config(mode).validate()
        for mode in self.fed.lr_by_mode:
            ad.parse_mode(mode)
        for a in self.sweep.alphas:
            if not float(a) > 0:
                raise ConfigError(f"sweep.alphas must be > 0, got {a}")
        if not self.sweep.modes or not self.sweep.alphas or not self.sweep.seeds:
            raise ConfigError("sweep.modes, sweep.alphas and sweep.seeds must be non-empty")
        return self

    def synth_config(self) -> SynthConfig:
        return SynthConfig(seed=self.seed, **asdict(self.synth))

    def mode_for(self, name: str | None = None) -> ad.AdapterMode:
        a = self.adapter
        return ad.parse_mode(name or a.mode, rank=a.rank, beta=a.beta, bottleneck_dim=a.bottleneck_dim)

    def lr_for(self, mode: str) -> float:
        return float(self.fed.lr_by_mode.get(ad.parse_mode(mode).name, self.fed.lr))

    def fed_config(self, mode: str | None = None) -> FedConfig:
        f = self.fed
        name = self.mode_for(mode).name
        return FedConfig(
            rounds=f.rounds,
            num_clients=self.partition.num_clients,
            clients_per_round=f.clients_per_round,
            local_epochs=f.local_epochs,
            batch_size=f.batch_size,
            lr=self.lr_for(name),
            eval_every=f.eval_every,
            seed=self.seed,
            optimizer=f.optimizer,
            snapshot_stride=f.snapshot_stride,
            threads=self.threads,
        )


SECTIONS = tuple(f.name for f in fields(ExperimentConfig))


def _coerce(path: str, value, default):
    """Check ``value`` against the type of the built-in ``default``; ints are accepted for floats."""
    if value is None and default is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        return value
    if isinstance(default, float) or (default is None and path.endswith("beta")):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path} must be a list, got {value!r}")
        return list(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path} must be a table, got {value!r}")
        return dict(value)
    return value


def config_from_dict(raw: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Overlay ``raw`` (as parsed from TOML) on ``base``; unknown keys are rejected."""
    cfg = base or ExperimentConfig()
    updates = {}
    for key, value in raw.items():
        if key in SECTIONS and key not in ("seed", "out", "threads"):
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            current = getattr(cfg, key)
            pristine = getattr(ExperimentConfig(), key)
            known = {f.name: getattr(pristine, f.name) for f in fields(pristine)}
            sub = {}
            for k, v in value.items():
                if k not in known:
                    raise ConfigError(f"unknown config key {key}.{k}; known keys: {', '.join(known)}")
                sub[k] = _coerce(f"{key}.{k}", v, known[k])
            updates[key] = replace(current, **sub)
        elif key in ("seed", "out", "threads"):
            updates[key] = _coerce(key, value, getattr(ExperimentConfig(), key))
        else:
            raise ConfigError(f"unknown config key {key!r}; known keys: {', '.join(SECTIONS)}")
    return replace(cfg, **updates)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
    return config_from_dict(raw)


def key_paths(cfg: ExperimentConfig | None = None) -> dict[str, object]:
    """Every overridable dotted key path with its current value."""
    cfg = cfg or ExperimentConfig()
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sf in fields(value):
                out[f"{f.name}.{sf.name}"] = getattr(value, sf.name)
        else:
            out[f.name] = value
    return out


def parse_override(path: str, text: str, default):
    """Parse a command-line string for key ``path`` using the type of its default."""
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or (default is None and path.endswith("beta")):
            return float(text)
        if isinstance(default, list):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if path == "sweep.alphas":
                return [float(t) for t in items]
            if path == "sweep.seeds":
                return [int(t) for t in items]
            return items
        if isinstance(default, dict):
            out = {}
            for item in text.split(","):
                k, _, v = item.partition("=")
                out[k.strip()] = float(v)
            return out
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r} for {path}") from exc
    return text


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, object]) -> ExperimentConfig:
    raw: dict = {}
    for path, value in overrides.items():
        if "." in path:
            section, key = path.split(".", 1)
            raw.setdefault(section, {})[key] = value
        else:
            raw[path] = value
    return config_from_dict(raw, cfg)


def _fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def _read_json(path: Path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def fmt(x) -> str:
    """Round-trip exact float text for CSVs; empty for missing values."""
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return f"{float(x):.17g}"


def alpha_tag(alpha: float) -> str:
    return f"alpha{float(alpha):g}"


# --- paths -----------------------------------------------------------------


@dataclass(frozen=True)
class Layout:
    root: Path

    @property
    def dataset(self) -> Path:
        return self.root / "data" / "dataset.jsonl"

    @property
    def pretrain_dir(self) -> Path:
        return self.root / "pretrain"

    @property
    def checkpoint(self) -> Path:
        return self.pretrain_dir / "params.fdra"

    def partition_dir(self, alpha: float) -> Path:
        return self.root / "partition" / alpha_tag(alpha)

    def run_dir(self, mode: str, alpha: float) -> Path:
        return self.root / "runs" / f"{ad.parse_mode(mode).name}-{alpha_tag(alpha)}"


# --- stages ----------------------------------------------------------------


def data_fingerprint(cfg: ExperimentConfig) -> str:
    return _fingerprint({"seed": cfg.seed, "synth": asdict(cfg.synth), "path": cfg.data.path})


def cmd_generate(cfg: ExperimentConfig) -> Path:
    """Write the full dataset (train and test are split from it on load)."""
    cfg.validate()
    layout = Layout(Path(cfg.out))
    if cfg.data.path:
        src = Path(cfg.data.path)
        loader = load_csv if src.suffix.lower() == ".csv" else load_jsonl
        ds = loader(src, cfg.synth.vocab_size, cfg.synth.seq_len, cfg.synth.num_classes)
        meta = {"source": str(src)}
    else:
        ds = synth_generate(cfg.synth_config())
        meta = {"source": "synthetic", "synth": asdict(cfg.synth), "seed": cfg.seed}
    meta["fingerprint"] = data_fingerprint(cfg)
    layout.dataset.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, layout.dataset, meta)
    log.info("wrote %d samples to %s", len(ds), layout.dataset)
    return layout.dataset


def _is_current(meta_file: Path, fingerprint: str) -> bool:
    if not meta_file.exists():
        return False
    try:
        return json.loads(meta_file.read_text(encoding="utf-8")).get("fingerprint") == fingerprint
    except (OSError, json.JSONDecodeError):
        return False


def ensure_dataset(cfg: ExperimentConfig) -> Dataset:
    layout = Layout(Path(cfg.out))
    from .data import meta_path

    if not _is_current(meta_path(layout.dataset), data_fingerprint(cfg)):
        cmd_generate(cfg)
    return load_dataset(layout.dataset)


def split(cfg: ExperimentConfig, ds: Dataset) -> tuple[Dataset, Dataset]:
    return train_test_split(ds, cfg.data.test_fraction, cfg.seed)


def model_config(cfg: ExperimentConfig, num_classes: int | None = None) -> ModelConfig:
    return ModelConfig(
        vocab_size=cfg.synth.vocab_size,
        seq_len=cfg.synth.seq_len,
        embed_dim=cfg.model.embed_dim,
        ffn_dim=cfg.model.ffn_dim,
        num_blocks=cfg.model.num_blocks,
        num_classes=num_classes or cfg.synth.num_classes,
    )


def pretrain_fingerprint(cfg: ExperimentConfig) -> str:
    return _fingerprint({"data": data_fingerprint(cfg), "model": asdict(cfg.model), "pretrain": asdict(cfg.pretrain)})


def pretrain_task(cfg: ExperimentConfig) -> Dataset:
    """Held-out pretraining corpus: the downstream signal-token pool dealt into finer classes.

    Pretraining and downstream tasks share vocabulary statistics but not
    labels, so the pretrained encoder carries structure without having seen
    the downstream label map.
    """
    p = cfg.pretrain
    base = cfg.synth_config()
    pool = base.num_classes * base.signal_tokens_per_class
    if pool % p.num_classes:
        raise ConfigError(
            f"pretrain.num_classes={p.num_classes} must divide the {pool} downstream signal tokens"
        )
    task = replace(
        base,
        seed=base.seed + 7919,
        num_classes=p.num_classes,
        signal_tokens_per_class=pool // p.num_classes,
        samples_per_class=max(1, p.samples // p.num_classes),
    )
    return synth_generate(task, signal=regrouped_signal(base, cfg.seed, p.num_classes))


def cmd_pretrain(cfg: ExperimentConfig) -> Path:
    """Centralized full fine-tuning on the pretraining task; writes the checkpoint."""
    cfg.validate()
    layout = Layout(Path(cfg.out))
    layout.pretrain_dir.mkdir(parents=True, exist_ok=True)
    p = cfg.pretrain
    info = {"fingerprint": pretrain_fingerprint(cfg), "enabled": p.enabled}
    if not p.enabled:
        log.warning("pretraining disabled: writing a randomly initialized checkpoint")
        params = init_params(model_config(cfg), cfg.seed, cfg.model.init_std)
        info["train_accuracy"] = None
        history = []
    else:
        task = pretrain_task(cfg)
        params = init_params(model_config(cfg, p.num_classes), cfg.seed, cfg.model.init_std)
        rng = make_rng(cfg.seed, "pretrain")
        history = []
        for epoch in range(1, p.epochs + 1):
            try:
                params, _, loss = train_epochs(
                    params, None, task.tokens, task.labels, np.arange(len(task)),
                    epochs=1, batch_size=p.batch_size, lr=p.lr, rng=rng, optimizer=p.optimizer,
                )
            except NumericError as exc:
                raise NumericError(
                    f"pretraining diverged in epoch {epoch} (lr={p.lr}, optimizer={p.optimizer}): {exc}"
                ) from exc
            history.append((epoch, loss))
            log.info("pretrain epoch %d loss %.6f", epoch, loss)
        info["train_accuracy"] = evaluate(params, None, task)["accuracy"]
        info["task_classes"] = p.num_classes
    serialize.save(layout.checkpoint, params)
    with (layout.pretrain_dir / "history.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for epoch, loss in history:
            w.writerow([epoch, fmt(loss)])
    _write_json(layout.pretrain_dir / "meta.json", info)
    return layout.checkpoint


def ensure_checkpoint(cfg: ExperimentConfig) -> dict:
    layout = Layout(Path(cfg.out))
    if not _is_current(layout.pretrain_dir / "meta.json", pretrain_fingerprint(cfg)):
        cmd_pretrain(cfg)
    return serialize.load(layout.checkpoint)


def fresh_head(params: dict, num_classes: int, cfg: ExperimentConfig) -> dict:
    """Swap in a newly initialized classifier for the downstream label set."""
    params = dict(params)
    d = params["token_embedding"].shape[1]
    params["w_cls"] = make_rng(cfg.seed, "head-init").standard_normal((d, num_classes)) * cfg.model.init_std
    params["b_cls"] = np.zeros(num_classes)
    return params


def partition_fingerprint(cfg: ExperimentConfig, alpha: float) -> str:
    return _fingerprint({
        "data": data_fingerprint(cfg),
        "test_fraction": cfg.data.test_fraction,
        "num_clients": cfg.partition.num_clients,
        "alpha": float(alpha),
    })


def cmd_partition(cfg: ExperimentConfig, alpha: float | None = None) -> Path:
    cfg.validate()
    alpha = cfg.partition.alpha if alpha is None else float(alpha)
    layout = Layout(Path(cfg.out))
    train, _ = split(cfg, ensure_dataset(cfg))
    shards = partition(train, PartitionConfig(cfg.partition.num_clients, alpha, cfg.seed))
    out = layout.partition_dir(alpha)
    out.mkdir(parents=True, exist_ok=True)
    write_shards_json(out / "shards.json", shards)
    matrix, mean_js = heterogeneity_matrix(shards) if len(shards) > 1 else (np.zeros((1, 1)), 0.0)
    write_matrix_csv(out / "js_matrix.csv", matrix)
    with (out / "client_sizes.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client", "num_samples"] + [f"class_{c}" for c in range(train.num_classes)])
        for s in shards:
            w.writerow([s.client_id, len(s)] + [fmt(x) for x in s.empirical_dist])
    _write_json(out / "heterogeneity.json", {
        "fingerprint": partition_fingerprint(cfg, alpha),
        "alpha": alpha,
        "seed": cfg.seed,
        "num_clients": cfg.partition.num_clients,
        "mean_pairwise_js": mean_js,
    })
    return out


def ensure_shards(cfg: ExperimentConfig, alpha: float, train: Dataset):
    out = Layout(Path(cfg.out)).partition_dir(alpha)
    if not _is_current(out / "heterogeneity.json", partition_fingerprint(cfg, alpha)):
        cmd_partition(cfg, alpha)
    return read_shards_json(out / "shards.json", train.labels), out


ROUND_COLUMNS = ["round", "accuracy", "macro_f1", "loss", "uplink_bytes", "downlink_bytes"]


def write_rounds_csv(path: Path, reports: list[RoundReport]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUND_COLUMNS)
        for r in reports:
            w.writerow([r.round, fmt(r.accuracy), fmt(r.macro_f1), fmt(r.loss), r.uplink_bytes, r.downlink_bytes])


def write_timings_csv(path: Path, reports: list[RoundReport]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "train_seconds", "agg_seconds", "selected"])
        for r in reports:
            w.writerow([r.round, f"{r.train_seconds:.6f}", f"{r.agg_seconds:.6f}", " ".join(map(str, r.selected))])


def cmd_run(cfg: ExperimentConfig, mode: str | None = None, alpha: float | None = None) -> Path:
    """One federated run; missing upstream artifacts are produced inline."""
    cfg.validate()
    mode_obj = cfg.mode_for(mode)
    alpha = cfg.partition.alpha if alpha is None else float(alpha)
    layout = Layout(Path(cfg.out))
    ds = ensure_dataset(cfg)
    train, test = split(cfg, ds)
    shards, part_dir = ensure_shards(cfg, alpha, train)
    params = fresh_head(ensure_checkpoint(cfg), ds.num_classes, cfg)
    mcfg = model_config(cfg, ds.num_classes)
    rng = make_rng(cfg.seed, "adapter-init")
    adapters = ad.attach(params, mode_obj, rng, tuple(cfg.adapter.targets))
    fed = cfg.fed_config(mode_obj.name)
    out = layout.run_dir(mode_obj.name, alpha)
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    for old in (out / "snapshots").glob("*.fdra"):
        old.unlink()
    frozen = {k: v for k, v in params.items() if k not in adapters.trainable_names}
    serialize.save(out / "frozen.fdra", frozen)

    def progress(r: RoundReport):
        if r.accuracy is not None:
            log.info("%s alpha=%g round %d accuracy %.4f loss %.4f", mode_obj.name, alpha, r.round, r.accuracy, r.loss)

    result = run(train, test, shards, fed, params, adapters, progress=progress)
    for t, snap in result.snapshots:
        serialize.save(out / "snapshots" / f"round_{t:04d}.fdra", snap)
    serialize.save(out / "final.fdra", result.state.trainables)
    write_rounds_csv(out / "rounds.csv", result.reports)
    write_timings_csv(out / "timings.csv", result.reports)
    evaluated = [r for r in result.reports if r.accuracy is not None]
    final = evaluated[-1]
    counts = ad.trainable_parameters(mode_obj, mcfg, tuple(cfg.adapter.targets))
    summary = {
        "config": cfg.to_dict(),
        "resolved": {
            "mode": mode_obj.name,
            "alpha": alpha,
            "lr": fed.lr,
            "model": asdict(mcfg),
            "fed": asdict(fed),
            "partition_dir": str(part_dir),
        },
        "final": {"round": final.round, "accuracy": final.accuracy, "macro_f1": final.macro_f1, "loss": final.loss},
        "best_accuracy": max(r.accuracy for r in evaluated),
        "trainable_parameters": counts["count"],
        "adapter_parameters": counts["adapter_count"],
        "bytes_per_round_each_direction": comm_cost(mode_obj, mcfg, fed.clients_per_round, tuple(cfg.adapter.targets)),
        "time_to_target": time_to_target(result.reports, TARGETS),
        "simulated_seconds": {
            "train": sum(r.train_seconds for r in result.reports),
            "aggregate": sum(r.agg_seconds for r in result.reports),
        },
    }
    _write_json(out / "summary.json", summary)
    return out


# --- drift -----------------------------------------------------------------


def load_snapshots(run_dir: Path) -> tuple[list[int], list[dict]]:
    files = sorted((Path(run_dir) / "snapshots").glob("round_*.fdra"))
    if len(files) < 2:
        raise DataError(f"{run_dir}: drift needs at least two snapshots, found {len(files)}")
    rounds = [int(f.stem.split("_")[1]) for f in files]
    return rounds, [serialize.load(f) for f in files]


def default_drift_tensors(snapshot: dict) -> list[str]:
    lora = [n for n in snapshot if n.endswith(".lora_a") or n.endswith(".lora_b")]
    if lora:
        return sorted(lora)
    return sorted(n for n, v in snapshot.items() if v.ndim == 2)


def cmd_drift(run_dir, tensor_names=None, effective: bool = False) -> list[Path]:
    """Write ``drift/<tensor>.csv`` per tensor plus a combined ``drift.csv``."""
    run_dir = Path(run_dir)
    rounds, snaps = load_snapshots(run_dir)
    names = list(tensor_names) if tensor_names else default_drift_tensors(snaps[0])
    series = dr.drift_series(snaps, names, rounds)
    if effective:
        summary = _read_json(run_dir / "summary.json")
        frozen = serialize.load(run_dir / "frozen.fdra")
        targets = sorted({n.rsplit(".", 1)[0] for n in snaps[0] if n.endswith(".lora_a")})
        if not targets:
            raise DataError(f"{run_dir}: effective-weight drift needs a LoRA or FeDeRA run")
        a = summary["config"]["adapter"]
        scale = (a["beta"] if a["beta"] is not None else a["rank"]) / a["rank"]
        eff = dr.effective_snapshots(frozen, snaps, targets, scale)
        series.update(dr.drift_series(eff, [t + ".effective" for t in targets], rounds))
    out_dir = run_dir / "drift"
    out_dir.mkdir(exist_ok=True)
    written = []
    for name, s in series.items():
        path = out_dir / f"{name}.csv"
        dr.write_drift_csv(path, s)
        written.append(path)
    with (run_dir / "drift.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tensor", "round", "delta_m", "delta_d"])
        for name, s in series.items():
            for r, m, d in zip(s.rounds, s.delta_m, s.delta_d):
                w.writerow([name, r, fmt(m), fmt(d)])
    written.append(run_dir / "drift.csv")
    return written


def read_drift_csv(path) -> list[dict]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def mean_early_direction_drift(run_dir, suffix: str = ".lora_b", first: int = 1, last: int = 10) -> float:
    """Mean ``delta_d`` over rounds ``first..last`` across tensors ending in ``suffix``."""
    rows = read_drift_csv(Path(run_dir) / "drift.csv")
    vals = [float(r["delta_d"]) for r in rows if r["tensor"].endswith(suffix) and first <= int(r["round"]) <= last]
    if not vals:
        raise DataError(f"{run_dir}: no {suffix} drift rows in rounds {first}-{last}")
    return float(np.mean(vals))


# --- reporting -------------------------------------------------------------


def read_rounds_csv(path) -> list[dict]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


CONFIG_COLUMNS = ("vocab_size", "seq_len", "embed_dim", "ffn_dim", "num_blocks", "num_classes")


def cmd_report(run_dirs, out) -> Path:
    """Merge finished runs into comparison, accuracy-by-round/alpha and heterogeneity tables."""
    run_dirs = [Path(p) for p in run_dirs]
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for d in run_dirs:
        if not (d / "summary.json").exists() or not (d / "rounds.csv").exists():
            raise DataError(f"{d} is not a completed run (missing summary.json or rounds.csv)")
        runs.append((d, _read_json(d / "summary.json"), read_rounds_csv(d / "rounds.csv")))
    models = {json.dumps(s["resolved"]["model"], sort_keys=True) for _, s, _ in runs}
    rounds_set = {s["resolved"]["fed"]["rounds"] for _, s, _ in runs}
    mixed = len(models) > 1 or len(rounds_set) > 1
    if mixed:
        log.warning("report mixes runs with different model or round configurations; see config columns")

    with (out / "comparison.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "mode", "alpha", "seed", "rank", "lr", "final_accuracy", "final_macro_f1", "final_loss",
                    "best_accuracy", "trainable_parameters", "bytes_per_round", "rounds", *CONFIG_COLUMNS])
        for d, s, _ in runs:
            r, m = s["resolved"], s["resolved"]["model"]
            w.writerow([str(d), r["mode"], fmt(r["alpha"]), s["config"]["seed"], s["config"]["adapter"]["rank"], fmt(r["lr"]),
                        fmt(s["final"]["accuracy"]), fmt(s["final"]["macro_f1"]), fmt(s["final"]["loss"]),
                        fmt(s["best_accuracy"]), s["trainable_parameters"], s["bytes_per_round_each_direction"],
                        r["fed"]["rounds"], *(m[c] for c in CONFIG_COLUMNS)])

    if len(runs) == 1:
        (out / "rounds.csv").write_bytes((run_dirs[0] / "rounds.csv").read_bytes())
    labels = [f"{s['resolved']['mode']}/{alpha_tag(s['resolved']['alpha'])}/seed{s['config']['seed']}" for _, s, _ in runs]
    max_round = max(int(rows[-1]["round"]) for _, _, rows in runs if rows)
    by_round = [{int(r["round"]): r["accuracy"] for r in rows} for _, _, rows in runs]
    with (out / "accuracy_by_round.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", *labels])
        for t in range(1, max_round + 1):
            w.writerow([t, *(acc.get(t, "") for acc in by_round)])

    table: dict[str, dict[float, list[float]]] = {}
    for _, s, _ in runs:
        table.setdefault(s["resolved"]["mode"], {}).setdefault(float(s["resolved"]["alpha"]), []).append(s["final"]["accuracy"])
    alphas = sorted({a for v in table.values() for a in v})
    with (out / "accuracy_by_alpha.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", *(alpha_tag(a) for a in alphas)])
        for mode in [m for m in ad.MODE_NAMES if m in table]:
            w.writerow([mode, *(fmt(statistics.median(table[mode][a])) if a in table[mode] else "" for a in alphas)])

    het = {}
    for _, s, _ in runs:
        pdir = Path(s["resolved"]["partition_dir"])
        if (pdir / "heterogeneity.json").exists():
            h = _read_json(pdir / "heterogeneity.json")
            het[(float(h["alpha"]), int(h["seed"]), str(pdir))] = h["mean_pairwise_js"]
    with (out / "heterogeneity.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "seed", "mean_pairwise_js", "partition_dir"])
        for (alpha, seed, pdir), js in sorted(het.items()):
            w.writerow([fmt(alpha), seed, fmt(js), pdir])
    _write_json(out / "report.json", {"runs": [str(d) for d in run_dirs], "mixed_configs": mixed})
    return out


# --- sweep -----------------------------------------------------------------


def cmd_sweep(cfg: ExperimentConfig) -> Path:
    """Every (seed, alpha, mode) combination, drift for low-rank runs, then one report."""
    cfg.validate()
    root = Path(cfg.out)
    run_dirs = []
    for seed in cfg.sweep.seeds:
        sub = replace(cfg, seed=int(seed), out=str(root / f"seed{int(seed)}"))
        for alpha in cfg.sweep.alphas:
            for mode in cfg.sweep.modes:
                d = cmd_run(sub, mode, float(alpha))
                if isinstance(sub.mode_for(mode), ad.LoRA):
                    cmd_drift(d, cfg.drift.tensors or None, cfg.drift.effective)
                run_dirs.append(d)
    return cmd_report(run_dirs, root / "report")


def median_final_accuracy(comparison_csv, mode: str, alpha: float) -> float:
    with Path(comparison_csv).open(encoding="utf-8", newline="") as fh:
        vals = [float(r["final_accuracy"]) for r in csv.DictReader(fh)
                if r["mode"] == mode and math.isclose(float(r["alpha"]), alpha)]
    if not vals:
        raise DataError(f"no runs for mode {mode} at alpha {alpha} in {comparison_csv}")
    return statistics.median(vals)
