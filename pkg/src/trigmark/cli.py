"""Command line driver for the watermark lifecycle.

Every subcommand works inside a run directory. The resolved configuration
is written there as ``manifest.ini`` and reused by later subcommands, so a
sequence like ``train-clean``, ``optimize-pattern``, ``build-triggers``,
``embed``, ``verify`` shares one seed and one data split.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as wio
from .attacks import SCOPE_NOTE, AttackConfig, evaluate_robustness, finetune_attack, robustness_table
from .classifier import MLP, accuracy, train
from .config import ConfigFileError, RunConfig, from_ini, load_config, to_ini
from .core import LabeledDataset, Message, PatternError, binary_alphabet, sign_alphabet
from .de import (
    FitnessParams,
    KeyBounds,
    LogoBounds,
    fitness_location,
    fitness_location_value,
    key_embedder,
    key_evolver,
    key_initializer,
    key_pattern_for,
    logo_embedder,
    logo_evolver,
    logo_initializer,
    logo_pattern_for,
    run_de,
    sample_fitness_subset,
)
from .pipeline import (
    build_trigger_set,
    embed_watermark,
    false_positive_rate,
    trigger_accuracy,
    verify_watermark,
)
from .synthetic import generate_synthetic

COMMANDS = ("train-clean", "optimize-pattern", "build-triggers", "embed", "verify", "fp-rate", "attack",
            "report", "demo")


class CliError(Exception):
    pass


@dataclass
class Splits:
    train: LabeledDataset
    trigger_pool: LabeledDataset
    attacker: LabeledDataset
    evaluation: LabeledDataset


def load_datasets(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    d = cfg.data
    if d.source == "synthetic":
        return generate_synthetic(cfg.synthetic, cfg.seed_for("data"))
    for p in (d.train_images, d.train_labels, d.test_images, d.test_labels):
        if not p or not Path(p).exists():
            raise CliError(f"dataset file not found: {p or '(empty path)'}")
    train_set = wio.load_idx(d.train_images, d.train_labels, d.num_classes)
    test = wio.load_idx(d.test_images, d.test_labels, d.num_classes)
    # keep ids disjoint across splits
    test = LabeledDataset(test.images, test.labels, test.num_classes, test.ids + len(train_set))
    return train_set, test


def split(cfg: RunConfig) -> Splits:
    """Partition the test split into trigger pool, attacker data and evaluation data."""
    train_set, test = load_datasets(cfg)
    order = np.random.default_rng(cfg.seed_for("split")).permutation(len(test))
    n_pool = max(cfg.triggers.count, int(round(cfg.data.trigger_pool_fraction * len(test))))
    n_att = int(round(cfg.data.attacker_fraction * len(test)))
    if n_pool + n_att >= len(test):
        raise CliError(f"test split of {len(test)} is too small for {n_pool} trigger and {n_att} attacker samples")
    return Splits(train_set, test.subset(order[:n_pool]), test.subset(order[n_pool:n_pool + n_att]),
                  test.subset(order[n_pool + n_att:]))


def message_for(cfg: RunConfig, channels: int) -> Message:
    p = cfg.pattern
    bits = p.message
    if not bits:
        rng = np.random.default_rng(cfg.seed_for("message"))
        bits = "".join(rng.choice(["0", "1"], size=p.num_pixels * p.bits_per_pixel))
    if p.bits_per_pixel == 1:
        alphabet = binary_alphabet(p.zero_value, p.one_value)
    else:
        if channels != 3:
            raise CliError("2-bit key messages need RGB images")
        alphabet = sign_alphabet(p.magnitude)
    return Message(bits, p.bits_per_pixel, alphabet)


def default_logo(size: int, channels: int) -> np.ndarray:
    """A hollow square with a centre dot: shaped, so support differs from bounding box."""
    bitmap = np.zeros((size, size, channels))
    bitmap[0, :] = bitmap[-1, :] = bitmap[:, 0] = bitmap[:, -1] = 255.0
    bitmap[size // 2, size // 2] = 255.0
    return bitmap


class Workspace:
    def __init__(self, cfg: RunConfig, workdir: Path):
        self.cfg = cfg
        self.dir = workdir
        self._splits: Optional[Splits] = None

    def path(self, name: str) -> Path:
        return self.dir / name

    @property
    def splits(self) -> Splits:
        if self._splits is None:
            self._splits = split(self.cfg)
        return self._splits

    def need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise CliError(f"missing artifact {p}; run the earlier pipeline stage first")
        return p

    def write(self, name: str, text: str) -> None:
        self.path(name).write_text(text)
        print(f"wrote {self.path(name)}")


# -- stages ------------------------------------------------------------------


def cmd_train_clean(ws: Workspace, args) -> None:
    cfg, s = ws.cfg, ws.splits
    model = MLP(s.train.image_shape, cfg.model.layers(), s.train.num_classes, seed=cfg.seed_for("clean-init"))
    history = train(model, s.train, cfg.train)
    wio.save_model(ws.path("clean_model.npz"), model)
    acc = model.accuracy(s.evaluation)
    ws.write("clean.txt", f"format_version = 1\nfinal_loss = {history[-1]:.6f}\ntest_accuracy = {acc:.6f}\n")
    print(f"clean test accuracy {acc:.4f}")


def cmd_optimize_pattern(ws: Workspace, args) -> None:
    cfg, s = ws.cfg, ws.splits
    clean = wio.load_model(ws.need("clean_model.npz"))
    shape = s.train.image_shape
    subset = sample_fitness_subset(s.train, cfg.de.fitness_subset_size, cfg.seed_for("fitness-subset"))
    value_mode = cfg.fitness.objective == "location_and_value"
    baseline_rng = np.random.default_rng(cfg.seed_for("baseline"))

    if cfg.pattern.kind == "key":
        bounds = KeyBounds(shape[1], shape[0])
        if value_mode:
            message = None
            init = key_initializer(cfg.pattern.num_pixels, bounds, init_values=cfg.pattern.one_value)
        else:
            message = message_for(cfg, shape[2])
            init = key_initializer(message.num_pixels, bounds)
        embed = key_embedder(shape, message)
        evolve = key_evolver(cfg.de.pairing_mode, bounds)
        to_pattern = lambda c: key_pattern_for(c, shape, message)
        baseline = to_pattern(init(baseline_rng))
        fparams = cfg.fitness
    else:
        bitmap = default_logo(cfg.pattern.logo_size, shape[2])
        third = (0.0, 1.0) if cfg.pattern.blend_mode == "alpha" else (0.0, 255.0)
        bounds = LogoBounds.for_logo(bitmap.shape, shape, third)
        embed = logo_embedder(bitmap, cfg.pattern.blend_mode, cfg.pattern.fixed_value)
        init = logo_initializer(bounds)
        evolve = logo_evolver(bounds)
        to_pattern = lambda c: logo_pattern_for(c, bitmap, cfg.pattern.blend_mode, cfg.pattern.fixed_value)
        fparams = FitnessParams(cfg.fitness.objective, cfg.fitness.value_weight, cfg.fitness.value_weight_budget,
                                value_max=third[1])
        baseline = None

    if value_mode:
        get_values = (lambda c: c.values) if cfg.pattern.kind == "key" else (lambda c: [c[2]])
        fitness = lambda c: fitness_location_value(c, clean, subset, embed, fparams, get_values(c))
    else:
        fitness = lambda c: fitness_location(c, clean, subset, embed)

    best, trace = run_de(fitness, init, cfg.de, evolve)
    pattern = to_pattern(best)
    if baseline is None:
        # corner placement with the optimized blend, the usual hand-made choice
        baseline = logo_pattern_for([0.0, 0.0, best[2]], bitmap, cfg.pattern.blend_mode, cfg.pattern.fixed_value)
    wio.save_pattern(ws.path("pattern.json"), pattern)
    wio.save_pattern(ws.path("pattern_baseline.json"), baseline)
    ws.write("de_trace.csv", trace.to_csv())
    print(f"DE best fitness {trace.best_fitness[0]:.4f} -> {trace.best_fitness[-1]:.4f}")


def cmd_build_triggers(ws: Workspace, args) -> None:
    cfg, s = ws.cfg, ws.splits
    pattern = wio.load_pattern(ws.need("pattern.json"))
    pool = s.trigger_pool.subset(np.arange(cfg.triggers.count))
    triggers = build_trigger_set(pool, pattern, cfg.triggers.label_policy, cfg.seed_for("labels"),
                                 cfg.triggers.target, pattern_ref="pattern.json")
    wio.save_trigger_set(ws.path("triggers.npz"), triggers)
    print(f"built {len(triggers)} trigger images")


def cmd_embed(ws: Workspace, args) -> None:
    cfg, s = ws.cfg, ws.splits
    triggers = wio.load_trigger_set(ws.need("triggers.npz"))
    result = embed_watermark(s.train.image_shape, cfg.model.layers(), s.train, triggers, cfg.train,
                             cfg.triggers.trigger_fraction)
    wio.save_model(ws.path("watermarked_model.npz"), result.model)
    test_acc = result.model.accuracy(s.evaluation)
    ws.write("embed.txt", "\n".join([
        "format_version = 1",
        f"test_accuracy = {test_acc:.6f}",
        f"trigger_accuracy = {result.trigger_accuracy:.6f}",
        f"train_accuracy = {result.train_accuracy:.6f}",
    ]) + "\n")
    print(f"watermarked test accuracy {test_acc:.4f}, trigger accuracy {result.trigger_accuracy:.4f}")


def null_rho(ws: Workspace, triggers) -> float:
    if ws.cfg.verify.null_rho is not None:
        return ws.cfg.verify.null_rho
    floor = 1.0 / triggers.num_classes
    clean = ws.path("clean_model.npz")
    if clean.exists():
        return max(floor, false_positive_rate(wio.load_model(clean), triggers))
    return floor


def verify_model(ws: Workspace, model_path: Path):
    v = ws.cfg.verify
    triggers = wio.load_trigger_set(ws.need("triggers.npz"))
    model = wio.load_model(model_path)
    return verify_watermark(model, triggers, v.n_queries, v.delta, null_rho(ws, triggers), v.significance,
                            ws.cfg.seed_for("verify"))


def cmd_verify(ws: Workspace, args) -> None:
    model_path = Path(args.model) if args.model else ws.path("watermarked_model.npz")
    if not model_path.exists():
        raise CliError(f"model file not found: {model_path}")
    result = verify_model(ws, model_path)
    ws.write(f"verification_{model_path.stem}.txt", result.to_text())
    print(f"{model_path.name}: {result.decision} (misclassified {result.n_misclassified}/{result.n_queried}, "
          f"p = {result.p_value:.3e})")


def cmd_fp_rate(ws: Workspace, args) -> None:
    cfg, s = ws.cfg, ws.splits
    clean = wio.load_model(ws.need("clean_model.npz"))
    seed = cfg.seed_for("probe-labels")
    rates = {}
    for name in ("pattern", "pattern_baseline"):
        pattern = wio.load_pattern(ws.need(f"{name}.json"))
        probe = build_trigger_set(s.evaluation, pattern, cfg.triggers.label_policy, seed, cfg.triggers.target)
        rates[name] = false_positive_rate(clean, probe)
    ratio = rates["pattern_baseline"] / rates["pattern"] if rates["pattern"] > 0 else float("inf")
    ws.write("fp_rate.txt", "\n".join([
        "format_version = 1",
        f"probe_size = {len(s.evaluation)}",
        f"optimized_fp_rate = {rates['pattern']:.6f}",
        f"baseline_fp_rate = {rates['pattern_baseline']:.6f}",
        f"baseline_to_optimized_ratio = {ratio:.6f}",
    ]) + "\n")
    print(f"false positive rate: optimized {rates['pattern']:.4f}, baseline {rates['pattern_baseline']:.4f}")


def cmd_attack(ws: Workspace, args) -> None:
    cfg, s = ws.cfg, ws.splits
    model = wio.load_model(ws.need("watermarked_model.npz"))
    triggers = wio.load_trigger_set(ws.need("triggers.npz"))
    a = cfg.attack
    attack = AttackConfig(s.attacker, epochs=a.epochs, learning_rate=a.learning_rate, momentum=cfg.train.momentum,
                          batch_size=cfg.train.batch_size, shift_range=a.shift_range,
                          horizontal_flip=a.horizontal_flip, rng_seed=cfg.seed_for("attack"),
                          forbidden_ids=np.concatenate([s.train.ids, triggers.source_ids]))
    attacked = finetune_attack(model, attack)
    wio.save_model(ws.path("attacked_model.npz"), attacked)
    report = evaluate_robustness(model, attacked, triggers, s.evaluation)
    label = f"{cfg.pattern.kind}-de"
    ws.write("robustness.txt", report.to_text() + f"attack_epochs = {a.epochs}\n"
             f"attack_learning_rate = {a.learning_rate!r}\n\n" + robustness_table([(label, report)]))
    print(f"trigger accuracy {report.trigger_accuracy_before:.4f} -> {report.trigger_accuracy_after:.4f}")


def _read_kv(path: Path) -> dict:
    out = {}
    if path.exists():
        for line in path.read_text().splitlines():
            if " = " in line:
                k, v = line.split(" = ", 1)
                out[k.strip()] = v.strip()
    return out


def cmd_report(ws: Workspace, args) -> None:
    cfg, s = ws.cfg, ws.splits
    lines = ["format_version = 1", f"seed = {cfg.run.seed}", f"pattern_kind = {cfg.pattern.kind}"]
    triggers = wio.load_trigger_set(ws.need("triggers.npz"))
    for name in ("clean_model", "watermarked_model", "attacked_model"):
        p = ws.path(f"{name}.npz")
        if not p.exists():
            continue
        model = wio.load_model(p)
        lines.append(f"{name}.test_accuracy = {model.accuracy(s.evaluation):.6f}")
        lines.append(f"{name}.trigger_accuracy = {trigger_accuracy(model, triggers):.6f}")
        v = verify_model(ws, p)
        lines.append(f"{name}.verification = {v.decision} (misclassified {v.n_misclassified}/{v.n_queried}, "
                     f"null_rho {v.null_rho:.6f}, p_value {v.p_value:.6e})")
    fp = _read_kv(ws.path("fp_rate.txt"))
    for key in ("optimized_fp_rate", "baseline_fp_rate"):
        if key in fp:
            lines.append(f"{key} = {fp[key]}")
    rob = _read_kv(ws.path("robustness.txt"))
    if "accuracy_loss" in rob:
        lines.append(f"trigger_accuracy_loss = {rob['accuracy_loss']}")
    lines.append(f"note = {SCOPE_NOTE}")
    ws.write("report.txt", "\n".join(lines) + "\n")


def cmd_demo(ws: Workspace, args) -> None:
    for step in (cmd_train_clean, cmd_optimize_pattern, cmd_build_triggers, cmd_embed, cmd_fp_rate, cmd_attack):
        step(ws, args)
    for name in ("watermarked_model", "clean_model", "attacked_model"):
        args.model = str(ws.path(f"{name}.npz"))
        cmd_verify(ws, args)
    cmd_report(ws, args)


HANDLERS = {
    "train-clean": cmd_train_clean,
    "optimize-pattern": cmd_optimize_pattern,
    "build-triggers": cmd_build_triggers,
    "embed": cmd_embed,
    "verify": cmd_verify,
    "fp-rate": cmd_fp_rate,
    "attack": cmd_attack,
    "report": cmd_report,
    "demo": cmd_demo,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trigmark", description="Trigger-pattern watermarking for image classifiers")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI run configuration (default: the run directory's manifest.ini)")
        p.add_argument("--workdir", help="run directory (default from config, 'run')")
        p.add_argument("--seed", type=int, help="override the run seed")
        if name == "verify":
            p.add_argument("--model", help="model to verify (default: watermarked_model.npz in the run directory)")
    return parser


def resolve_config(args) -> tuple[RunConfig, Path]:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = RunConfig()
        workdir = Path(args.workdir or cfg.run.workdir)
        manifest = workdir / "manifest.ini"
        if manifest.exists():
            cfg = from_ini(manifest.read_text())
    if args.workdir:
        cfg.run.workdir = args.workdir
    if args.seed is not None:
        cfg.run.seed = args.seed
    return cfg.resolve(), Path(cfg.run.workdir)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "model"):
        args.model = None
    try:
        cfg, workdir = resolve_config(args)
        workdir.mkdir(parents=True, exist_ok=True)
        (workdir / "manifest.ini").write_text(to_ini(cfg))
        HANDLERS[args.command](Workspace(cfg, workdir), args)
    except (CliError, ConfigFileError, PatternError, wio.FormatError, ValueError) as exc:
        print(f"trigmark {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
