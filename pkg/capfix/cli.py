"""capfix command line: generate, train, correct, evaluate."""
# pylint: disable=broad-exception-caught
import csv
import io
import json
import logging
import os
from contextlib import contextmanager

import click
import numpy as np

from capfix.config import load_config
from capfix.corpus import (as_token_map, atomic_write_many, build_vocab, format_jsonl, format_labeled,
                           load_captions, load_labeled, load_references, pair_ids)
from capfix.corrector import correct_file
from capfix.corruptor import DEFAULT_CONJUNCTIONS, DatasetSplits, generate_dataset
from capfix.errors import CapfixError, SchemaError
from capfix.log import configure_logging
from capfix.metrics import evaluate as evaluate_corpus
from capfix.metrics import mean_report, sentence_diagnostics
from capfix.neural import ModelDims, checkpoint_bytes, init_parameters, train as train_model

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_accuracy", "val_macro_f1")


@contextmanager
def _failing_command(name):
    """Turn errors into a logged message and exit status 1."""
    try:
        yield
    except click.ClickException:
        raise
    except (CapfixError, OSError, ValueError) as err:
        logger.error("%s failed: %s", name, err)
        raise click.ClickException(str(err)) from err
    except Exception as err:
        logger.exception("%s failed unexpectedly", name)
        raise click.ClickException(f"{name} failed: {err}") from err


def _emit(payload):
    click.echo(json.dumps(payload, sort_keys=True))


@click.group()
@click.option("--log-level", default="INFO", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
@click.option("--log-file", type=click.Path(dir_okay=False), default=None, help="Also append logs to this file.")
def cli(log_level, log_file):
    """Synthesize false-repetition errors, train the BiLSTM corrector, correct and evaluate captions."""
    configure_logging(log_level, log_file)


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the configured seed.")
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True)
def generate(config_path, seed, threads):
    """Corrupt the clean captions and write train/validation/test pairs plus a manifest."""
    with _failing_command("generate"):
        config = load_config(config_path).with_seed(seed)
        captions = load_captions(config.captions)
        splits = generate_dataset(captions, config.rules, config.ratios, config.seed, threads)

        outputs = {config.split_path(name): format_labeled(pairs) for name, pairs in splits.items()}
        test_pairs = list(pair_ids(splits.test))
        outputs[config.split_path("test_inputs")] = format_jsonl(
            {"id": pair_id, "caption": " ".join(pair.tokens)} for pair_id, pair in test_pairs
        )
        outputs[config.split_path("test_references")] = format_jsonl(
            {"id": pair_id, "captions": [" ".join(pair.clean_tokens())]} for pair_id, pair in test_pairs
        )
        manifest = {
            "seed": config.seed,
            "ratios": list(config.ratios),
            "rule_config_sha256": config.rules.fingerprint(),
            "counts": {"sentences": len(captions), **splits.counts()},
            "files": sorted(os.path.basename(path) for path in outputs),
        }
        outputs[config.manifest_path] = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        atomic_write_many(outputs)
        logger.info("Wrote %d files to %s", len(outputs), config.output_dir)
        _emit(manifest)


def _format_log(history):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for row in history:
        writer.writerow([
            row.epoch + 1, repr(row.lr), repr(float(row.train_loss)),
            "" if row.val_accuracy is None else repr(row.val_accuracy),
            "" if row.val_macro_f1 is None else repr(row.val_macro_f1),
        ])
    return buffer.getvalue()


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the configured seed.")
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--progress/--no-progress", default=False, help="Show a per-epoch progress bar.")
def train(config_path, seed, threads, progress):
    """Train the labeler on the generated splits; write the best checkpoint and a CSV log."""
    with _failing_command("train"):
        config = load_config(config_path).with_seed(seed)
        cfg = config.training
        if threads > 1:
            logger.warning("Training runs single-threaded for determinism; ignoring --threads %d", threads)
        splits = DatasetSplits(
            tuple(load_labeled(config.split_path("train"))),
            tuple(load_labeled(config.split_path("validation"))),
            (),
            config.seed,
        )
        vocab = build_vocab(splits.train, cfg.min_count)
        dims = ModelDims(len(vocab), cfg.embed_dim, cfg.hidden_dim)
        params = init_parameters(dims, np.random.default_rng([cfg.seed, 0]))
        result = train_model(params, vocab, splits, cfg, progress=progress)

        atomic_write_many({
            config.checkpoint: checkpoint_bytes(result.params, cfg, vocab),
            config.train_log: _format_log(result.history),
        })
        best = result.history[result.best_epoch]
        _emit({
            "checkpoint": config.checkpoint,
            "log": config.train_log,
            "best_epoch": result.best_epoch + 1,
            "val_accuracy": best.val_accuracy,
            "val_macro_f1": best.val_macro_f1,
        })


@cli.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("in_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_path", type=click.Path(dir_okay=False))
@click.option("--iterate", is_flag=True, help="Re-run until nothing changes (at most 3 passes).")
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--labels-out", type=click.Path(dir_okay=False), default=None,
              help="Also write the predicted labels as labeled pairs.")
def correct(checkpoint, in_path, out_path, iterate, threads, labels_out):
    """Delete the words the model labels 0 and print a JSON summary."""
    with _failing_command("correct"):
        summary = correct_file(checkpoint, in_path, out_path, iterate=iterate, threads=threads,
                               labels_out=labels_out)
        _emit(summary.to_dict())


def _paired_labels(gold, pred_path):
    pred = load_labeled(pred_path)
    if len(gold) != len(pred):
        raise SchemaError(f"{len(pred)} predicted sequences but {len(gold)} gold sequences")
    for row, (g, p) in enumerate(zip(gold, pred), start=1):
        if g.tokens != p.tokens:
            raise SchemaError(f"line {row}: predicted and gold labels cover different tokens")
    return [p.labels for p in pred], [g.labels for g in gold]


def _token_map(path):
    return as_token_map(load_captions(path))


def _write_diagnostics(path, rows):
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    atomic_write_many({path: buffer.getvalue()})


@cli.command()
@click.argument("files", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--compare", nargs=2, type=click.Path(exists=True, dir_okay=False), default=None,
              help="BEFORE AFTER candidate files; FILES is then just the references.")
@click.option("--labels", "gold_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Gold labeled pairs (generate's test split) for token metrics and correction fidelity.")
@click.option("--predictions", "pred_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Predicted labeled pairs (from correct --labels-out), paired with --labels by line.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Take the detector's conjunctions from this config's [rules] section.")
@click.option("--penalty", type=click.FloatRange(0.0, 1.0), default=0.9, show_default=True)
@click.option("--diagnostics", type=click.Path(dir_okay=False), default=None,
              help="Write per-sentence CSV diagnostics.")
def evaluate(files, compare, gold_path, pred_path, config_path, penalty, diagnostics):
    """
    Score CANDIDATES... against REFERENCES (the last file). Several candidate files,
    e.g. one per seed, are reported per run and averaged. With --compare BEFORE AFTER,
    FILES is only the references.
    """
    if compare:
        if len(files) != 1:
            raise click.UsageError("with --compare pass only the references file")
        if gold_path or diagnostics:
            raise click.UsageError("--labels and --diagnostics need candidates given as FILES")
    elif len(files) < 2:
        raise click.UsageError("expected CANDIDATES... REFERENCES")
    single = not compare and len(files) == 2
    if pred_path and not gold_path:
        raise click.UsageError("--predictions needs --labels")
    if (pred_path or diagnostics) and not single:
        raise click.UsageError("--predictions and --diagnostics need a single candidates file")

    with _failing_command("evaluate"):
        conjunctions = load_config(config_path).rules.conjunctions if config_path else DEFAULT_CONJUNCTIONS
        references = load_references(files[-1])
        if compare:
            rows = []
            for system, path in zip(("before", "after"), compare):
                report = evaluate_corpus(_token_map(path), references, penalty, conjunctions=conjunctions)
                rows.append({"system": system, **report.to_dict()})
            _emit({"rows": rows})
            return

        gold_pairs = load_labeled(gold_path) if gold_path else None
        gold = dict(pair_ids(gold_pairs)) if gold_pairs is not None else None
        labels = _paired_labels(gold_pairs, pred_path) if pred_path else None
        runs = [_token_map(path) for path in files[:-1]]
        reports = [evaluate_corpus(c, references, penalty, labels, gold, conjunctions) for c in runs]
        if single:
            if diagnostics:
                _write_diagnostics(diagnostics, sentence_diagnostics(runs[0], references, conjunctions))
            _emit(reports[0].to_dict())
            return
        _emit({
            "runs": [{"candidates": path, **r.to_dict()} for path, r in zip(files[:-1], reports)],
            "mean": mean_report(reports).to_dict(),
        })


def main():
    cli(prog_name="capfix")  # pylint: disable=no-value-for-parameter
