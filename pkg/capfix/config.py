"""
INI pipeline configuration.

[generate] captions, output_dir, train_ratio, val_ratio, test_ratio, seed
[rules]    conjunctions / tails as '|'-separated phrases, verb_suffixes as a
           comma list, verb_stoplist (path), adverb_suffix, partial_min_len,
           partial_max_len, clean_pair_ratio
[training] every TrainingConfig field, plus checkpoint and log paths

Relative paths resolve against the directory holding the config file.
"""
import configparser
import dataclasses
import logging
import os
from dataclasses import dataclass

from capfix.corruptor import RuleConfig, read_stoplist
from capfix.errors import ConfigError
from capfix.neural import TrainingConfig

logger = logging.getLogger(__name__)

_GENERATE_KEYS = {
    "captions": str, "output_dir": str, "train_ratio": float,
    "val_ratio": float, "test_ratio": float, "seed": int,
}
_RULE_KEYS = {
    "conjunctions": "phrases", "tails": "phrases", "verb_suffixes": "list",
    "verb_stoplist": str, "adverb_suffix": str, "partial_min_len": int,
    "partial_max_len": int, "clean_pair_ratio": int,
}
_TRAINING_PATH_KEYS = {"checkpoint": str, "log": str}
_TRAINING_KEYS = {f.name: type(f.default) for f in dataclasses.fields(TrainingConfig)}
_TRAINING_KEYS.update(_TRAINING_PATH_KEYS)
_SECTIONS = {"generate": _GENERATE_KEYS, "rules": _RULE_KEYS, "training": _TRAINING_KEYS}


@dataclass(frozen=True)
class PipelineConfig:
    captions: str
    output_dir: str
    ratios: tuple
    seed: int
    rules: RuleConfig
    training: TrainingConfig
    checkpoint: str
    train_log: str

    def split_path(self, name):
        return os.path.join(self.output_dir, f"{name}.jsonl")

    @property
    def manifest_path(self):
        return os.path.join(self.output_dir, "manifest.json")

    def with_seed(self, seed):
        if seed is None:
            return self
        return dataclasses.replace(self, seed=seed, training=dataclasses.replace(self.training, seed=seed))


def _convert(raw, kind):
    if kind == "phrases":
        phrases = tuple(tuple(part.split()) for part in raw.split("|"))
        if not all(phrases):
            raise ValueError("empty phrase")
        return phrases
    if kind == "list":
        return tuple(item.strip() for item in raw.split(",") if item.strip())
    return kind(raw.strip())


def _resolve(base_dir, path):
    path = os.path.expanduser(path)
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base_dir, path))


def load_config(path):
    """Parse and validate a config file, reporting every bad key at once."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            parser.read_file(handle)
    except configparser.Error as err:
        raise ConfigError(f"Cannot parse {path}: {err}") from err

    bad = []
    values = {name: {} for name in _SECTIONS}
    for section in parser.sections():
        if section not in _SECTIONS:
            bad.append(f"{section} (unknown section)")
            continue
        for key, raw in parser.items(section):
            kind = _SECTIONS[section].get(key)
            if kind is None:
                bad.append(f"{section}.{key} (unknown key)")
                continue
            try:
                values[section][key] = _convert(raw, kind)
            except ValueError:
                bad.append(f"{section}.{key} (bad value {raw!r})")
    for key in ("captions", "output_dir"):
        if key not in values["generate"]:
            bad.append(f"generate.{key} (missing)")
    if bad:
        raise ConfigError(f"Invalid config {path}", bad)

    base_dir = os.path.dirname(os.path.abspath(path))
    generate = values["generate"]
    rule_values = dict(values["rules"])
    stoplist_path = rule_values.pop("verb_stoplist", None)
    if stoplist_path:
        stoplist_path = _resolve(base_dir, stoplist_path)
        try:
            with open(stoplist_path, "r", encoding="utf-8") as handle:
                rule_values["verb_stoplist"] = read_stoplist(handle.read())
        except OSError as err:
            raise ConfigError(f"Cannot read verb stoplist: {err}", ["rules.verb_stoplist"]) from err

    training_values = dict(values["training"])
    output_dir = _resolve(base_dir, generate["output_dir"])
    checkpoint = training_values.pop("checkpoint", os.path.join(output_dir, "model.ckpt"))
    train_log = training_values.pop("log", os.path.join(output_dir, "train_log.csv"))

    rules = RuleConfig(**rule_values)
    training = TrainingConfig(**training_values)
    ratios = (
        generate.get("train_ratio", 0.8),
        generate.get("val_ratio", 0.1),
        generate.get("test_ratio", 0.1),
    )
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("Split ratios must be positive and sum to 1",
                          ["generate.train_ratio", "generate.val_ratio", "generate.test_ratio"])

    config = PipelineConfig(
        captions=_resolve(base_dir, generate["captions"]),
        output_dir=output_dir,
        ratios=ratios,
        seed=generate.get("seed", training.seed),
        rules=rules,
        training=training,
        checkpoint=_resolve(base_dir, checkpoint),
        train_log=_resolve(base_dir, train_log),
    )
    logger.info("Loaded config %s (rules %s)", path, rules.fingerprint()[:12])
    return config
