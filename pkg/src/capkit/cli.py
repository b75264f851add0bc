"""Command line interface.

Subcommands: preprocess, train, caption, ensemble, evaluate. Exit codes:
0 success, 2 input/validation failure, 3 numerical failure (NaN/Inf loss).
Outputs are byte-identical across reruns with the same inputs and seed,
except for an optional timestamp field removable with --no-timestamp.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import decode as dec
from . import ensemble as ens
from . import metrics as met
from . import textpipe as tp
from . import train as tr
from . import transformer as tf
from . import vision as vis
from .errors import CapkitError, NumericalError, ValidationError

log = logging.getLogger(__name__)


def _utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _read_text(path: Path, what: str) -> str:
    if not path.is_file():
        raise ValidationError(f"{what} file not found: {path}")
    return path.read_text(encoding="utf-8")


def _read_bytes(path: Path, what: str) -> bytes:
    if not path.is_file():
        raise ValidationError(f"{what} file not found: {path}")
    return path.read_bytes()


def _read_json(path: Path, what: str) -> dict:
    try:
        return json.loads(_read_text(path, what))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"bad JSON in {what} file {path}: {exc}") from None


@dataclass
class DatasetManifest:
    """Dataset layout: caption file, per-backbone feature files, splits."""

    captions_path: Path
    features_paths: dict[str, Path]
    splits: dict[str, list[str]]
    images_dir: Path | None = None
    captions: dict[str, list[str]] = field(default_factory=dict)

    @classmethod
    def load(cls, path: Path) -> "DatasetManifest":
        payload = _read_json(path, "manifest")
        base = path.parent
        try:
            captions_path = base / payload["captions_path"]
            features_paths = {name: base / p for name, p in payload["features_paths"].items()}
            splits = {name: list(ids) for name, ids in payload["splits"].items()}
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"manifest {path} missing field: {exc}") from None
        images_dir = base / payload["images_dir"] if payload.get("images_dir") else None
        manifest = cls(captions_path=captions_path, features_paths=features_paths,
                       splits=splits, images_dir=images_dir)
        manifest.validate()
        return manifest

    def validate(self) -> None:
        for name in self.features_paths:
            if name not in vis.SOURCES:
                raise ValidationError(f"manifest names unknown backbone {name!r}")
        seen: dict[str, str] = {}
        for split, ids in self.splits.items():
            for image_id in ids:
                if image_id in seen:
                    raise ValidationError(
                        f"image {image_id!r} appears in splits {seen[image_id]!r} "
                        f"and {split!r}")
                seen[image_id] = split
        self.captions = tp.read_caption_file(_read_text(self.captions_path, "captions"))
        for image_id in seen:
            if image_id not in self.captions:
                raise ValidationError(f"split image {image_id!r} has no captions")
        for name, fpath in self.features_paths.items():
            features = vis.read_feature_file(_read_bytes(fpath, "features"), source=name)
            for image_id in seen:
                if image_id not in features:
                    raise ValidationError(
                        f"split image {image_id!r} missing from {name} features")

    def split(self, name: str) -> list[str]:
        if name not in self.splits:
            raise ValidationError(f"manifest has no split {name!r} "
                                  f"(has {sorted(self.splits)})")
        return self.splits[name]

    def features_for(self, backbone: str) -> dict[str, vis.FeatureMap]:
        if backbone not in self.features_paths:
            raise ValidationError(f"manifest has no features for backbone {backbone!r}")
        return vis.read_feature_file(
            _read_bytes(self.features_paths[backbone], "features"), source=backbone)

    def image_for(self, image_id: str) -> vis.Image:
        if self.images_dir is None:
            raise ValidationError("manifest has no images_dir for the tinycnn path")
        path = self.images_dir / f"{image_id}.ppm"
        return vis.standardize(vis.load_ppm(_read_bytes(path, "image")))


def _tokenized_references(captions: dict[str, list[str]]) -> dict[str, list[list[str]]]:
    return {image_id: [tp.tokenize(tp.normalize(c)) for c in caps]
            for image_id, caps in captions.items()}


# ---------------------------------------------------------------------------
# subcommands


def cmd_preprocess(args) -> int:
    text = _read_text(Path(args.captions), "captions")
    captions = tp.read_caption_file(text)
    corpus = []
    for caps in captions.values():
        for caption in caps:
            corpus.append(tp.tokenize(tp.normalize(caption)))
    vocab = tp.build_vocab(corpus, min_freq=args.min_freq)
    Path(args.out_vocab).write_text(vocab.to_json(), encoding="utf-8")
    tokens = sum(len(t) for t in corpus)
    print(f"captions: {sum(len(c) for c in captions.values())} "
          f"over {len(captions)} images")
    print(f"tokens: {tokens}")
    print(f"types: {len({w for t in corpus for w in t})}")
    print(f"vocab size: {vocab.size} (specials included, min_freq={args.min_freq})")
    return 0


def _examples_for(manifest: DatasetManifest, split_ids: list[str], backbone: str,
                  features: dict[str, vis.FeatureMap] | None, vocab: tp.Vocabulary,
                  max_len: int) -> list[tr.Example]:
    examples = []
    for image_id in split_ids:
        for caption in manifest.captions[image_id]:
            tokens = tp.add_boundaries(tp.tokenize(tp.normalize(caption)))
            seq = tp.encode(tokens, vocab, max_len=max_len)
            if backbone == vis.TINYCNN:
                examples.append(tr.Example(image_id=image_id, caption=seq,
                                           image=manifest.image_for(image_id)))
            else:
                examples.append(tr.Example(image_id=image_id, caption=seq,
                                           features=[features[image_id]]))
    return examples


def cmd_train(args) -> int:
    config = _read_json(Path(args.config), "config")
    train_cfg = tr.TrainConfig.from_dict(config.get("train", {}))
    if args.seed is not None:
        train_cfg.seed = args.seed
    manifest = DatasetManifest.load(Path(args.manifest))
    backbone = args.backbone
    if backbone not in vis.SOURCES:
        raise ValidationError(f"unknown backbone {backbone!r}; registered: {vis.SOURCES}")

    train_ids = manifest.split("train")
    val_ids = manifest.split("val")
    corpus = [tp.tokenize(tp.normalize(c))
              for image_id in train_ids for c in manifest.captions[image_id]]
    vocab = tp.build_vocab(corpus, min_freq=args.min_freq)

    model_section = dict(config.get("model", {}))
    model_section.pop("vocab_size", None)
    model_section.pop("sources", None)
    d_model = int(model_section.get("d_model", 128))
    if backbone == vis.TINYCNN:
        if manifest.images_dir is None:
            raise ValidationError("tinycnn training needs images_dir in the manifest")
        for image_id in train_ids + val_ids:
            path = manifest.images_dir / f"{image_id}.ppm"
            if not path.is_file():
                raise ValidationError(f"split image {image_id!r} missing from images_dir")
        sources = {vis.TINYCNN: d_model}
        features = None
    else:
        features = manifest.features_for(backbone)
        sources = {backbone: features[train_ids[0]].dim}
    model_cfg = tf.ModelConfig(vocab_size=vocab.size, sources=sources, **model_section)

    model = tf.CaptionModel(model_cfg, seed=train_cfg.seed)
    if backbone == vis.TINYCNN:
        cnn = vis.TinyCnnParams.create(d_model=d_model, seed=train_cfg.seed + 1)
        captioner: tr.FeatureCaptioner = tr.TinyCnnCaptioner(model, cnn)
    else:
        cnn = None
        captioner = tr.FeatureCaptioner(model)

    dataset = tr.Dataset(
        train=_examples_for(manifest, train_ids, backbone, features, vocab,
                            model_cfg.max_len),
        val=_examples_for(manifest, val_ids, backbone, features, vocab,
                          model_cfg.max_len),
    )
    history = tr.fit(captioner, dataset, train_cfg)

    Path(args.out).write_bytes(tf.save_checkpoint(model, vocab, cnn))
    if args.history:
        stamp = None if args.no_timestamp else _utc_now()
        Path(args.history).write_text(tr.history_to_json(history, stamp), encoding="utf-8")
        if not args.no_figures:
            from .report import render_history_figure

            render_history_figure(history, Path(args.history).with_suffix(".png"))
    print(f"trained {backbone}: {len(history)} epochs, "
          f"final val loss {history[-1]['val_loss']:.6f}")
    return 0


def _load_checkpoints(paths: list[str]):
    loaded = []
    for p in paths:
        model, vocab, cnn = tf.load_checkpoint(_read_bytes(Path(p), "checkpoint"))
        loaded.append((Path(p).name, model, vocab, cnn))
    return loaded


def cmd_caption(args) -> int:
    manifest = DatasetManifest.load(Path(args.manifest))
    split_ids = manifest.split(args.split)
    checkpoints = _load_checkpoints(args.checkpoints)
    beam_k = 1 if args.decode == "greedy" else args.beam
    images: dict[str, list[dict]] = {image_id: [] for image_id in sorted(split_ids)}
    for name, model, vocab, cnn in checkpoints:
        sources = list(model.config.sources)
        if len(sources) != 1:
            raise ValidationError(f"checkpoint {name} must hold exactly one source")
        source = sources[0]
        if source == vis.TINYCNN:
            if cnn is None:
                raise ValidationError(f"checkpoint {name} lacks CNN weights")
            feature_of = lambda image_id: vis.tinycnn_forward(  # noqa: E731
                manifest.image_for(image_id), cnn)
        else:
            features = manifest.features_for(source)
            feature_of = lambda image_id: features[image_id]  # noqa: E731
        cfg = dec.BeamConfig(k=beam_k, max_len=model.config.max_len, alpha=args.alpha)
        for image_id in sorted(split_ids):
            memory = model.encode([feature_of(image_id)])
            if args.decode == "greedy":
                seq = dec.greedy_decode(memory, model, max_len=model.config.max_len)
                caption = tp.decode(seq, vocab)
                logprob = 0.0
            else:
                hyps = dec.beam_search(memory, model, cfg)
                caption = tp.decode(hyps[0].ids, vocab)
                logprob = hyps[0].logprob
            images[image_id].append(
                {"model": source, "caption": caption, "logprob": logprob})
    payload: dict = {"images": images}
    if not args.no_timestamp:
        payload["generated_at"] = _utc_now()
    Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                              encoding="utf-8")
    print(f"captioned {len(split_ids)} images with {len(checkpoints)} checkpoints")
    return 0


def cmd_ensemble(args) -> int:
    payload = _read_json(Path(args.candidates), "candidates")
    if "images" not in payload:
        raise ValidationError("candidates JSON lacks an 'images' map")
    all_candidates: dict[str, ens.CandidateSet] = {}
    for image_id, entries in sorted(payload["images"].items()):
        cands = ens.CandidateSet(image_id=image_id)
        for entry in entries:
            try:
                cands.register(entry["model"], entry["caption"].split(),
                               float(entry.get("logprob", 0.0)))
            except (KeyError, TypeError, AttributeError) as exc:
                raise ValidationError(
                    f"bad candidate entry for {image_id!r}: {exc}") from None
        all_candidates[image_id] = cands
    references = None
    if args.refs:
        captions = tp.read_caption_file(_read_text(Path(args.refs), "references"))
        references = _tokenized_references(captions)
    winners = ens.run_ensemble(all_candidates, references, args.mode)
    out_text = met.dump_candidate_file(
        {image_id: " ".join(tokens) for image_id, tokens in winners.items()})
    Path(args.out).write_text(out_text, encoding="utf-8")
    print(f"ensembled {len(winners)} images with mode {args.mode}")
    return 0


def cmd_evaluate(args) -> int:
    hyp = met.read_candidate_file(_read_text(Path(args.hyp), "candidate"))
    candidates = {image_id: tp.tokenize(tp.normalize(c)) for image_id, c in hyp.items()}
    ref_captions = tp.read_caption_file(_read_text(Path(args.refs), "references"))
    missing = sorted(set(candidates) - set(ref_captions))
    if missing:
        raise ValidationError(f"candidates without references: {missing[:5]}")
    references = {image_id: refs for image_id, refs
                  in _tokenized_references(ref_captions).items() if image_id in candidates}
    graph_pairs = None
    if args.graphs:
        cand_graphs = _read_json(Path(args.graphs[0]), "candidate graphs")
        ref_graphs = _read_json(Path(args.graphs[1]), "reference graphs")
        graph_pairs = {}
        for image_id in candidates:
            if image_id not in cand_graphs or image_id not in ref_graphs:
                raise ValidationError(f"scene graphs missing for {image_id!r}")
            graph_pairs[image_id] = (met.SceneGraph.from_lists(cand_graphs[image_id]),
                                     met.SceneGraph.from_lists(ref_graphs[image_id]))
    report = met.evaluate_corpus(candidates, references, graph_pairs)

    stamp = None if args.no_timestamp else _utc_now()
    out = Path(args.out)
    out.write_text(report.to_json(stamp), encoding="utf-8")
    _write_per_image_tsv(report, out.with_suffix(".tsv"))
    if not args.no_figures:
        from .report import render_metric_figure

        render_metric_figure(report, out.with_suffix("").parent /
                             (out.stem + "_metrics.png"))
    for key in met.METRIC_ORDER:
        if key in report.corpus:
            print(f"{key:>8}  {report.corpus[key]:.6f}")
    return 0


def _write_per_image_tsv(report: met.MetricReport, path: Path) -> None:
    keys = [k for k in met.METRIC_ORDER if k in report.corpus]
    lines = ["image_id\t" + "\t".join(keys)]
    for image_id in sorted(report.per_sentence):
        row = report.per_sentence[image_id]
        lines.append(image_id + "\t" + "\t".join(f"{row[k]:.6f}" for k in keys))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capkit",
                                     description="caption models, ensembles, metrics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="build a vocabulary from a caption file")
    p.add_argument("--captions", required=True)
    p.add_argument("--out-vocab", required=True)
    p.add_argument("--min-freq", type=int, default=tp.DEFAULT_MIN_FREQ)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one captioner on one backbone")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.capm)")
    p.add_argument("--history", help="write per-epoch history JSON here")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--min-freq", type=int, default=tp.DEFAULT_MIN_FREQ)
    p.add_argument("--no-timestamp", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="decode captions for a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--beam", type=int, default=dec.DEFAULT_BEAM_WIDTH)
    p.add_argument("--decode", choices=("beam", "greedy"), default="beam")
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--no-timestamp", action="store_true")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("ensemble", help="vote candidate captions down to one per image")
    p.add_argument("--candidates", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=ens.MODES, required=True)
    p.add_argument("--refs")
    p.add_argument("--no-timestamp", action="store_true")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("evaluate", help="score candidates against references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--graphs", nargs=2, metavar=("CAND", "REF"))
    p.add_argument("--no-timestamp", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except CapkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
