#!/usr/bin/env python3
"""``neggrounding`` command line.

Data goes to stdout or ``--out``; logs and status lines go to stderr.
Exit codes: 0 success, 1 domain or I/O error, 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Iterator, TextIO

import numpy as np

from . import adapter, embio, metrics, negtome, textparse
from .config import ToolConfig, load_config
from .errors import FormatError, NegGroundingError
from .pipeline import builder, clients, flickr, posthoc, stats
from .pipeline.overlay import load_image_ref
from .pipeline.schema import read_annotations

logger = logging.getLogger("neggrounding")

GREEN, RED, RESET = "\033[32m", "\033[31m", "\033[0m"


def _colour_ok() -> bool:
    return sys.stderr.isatty() and "NO_COLOR" not in os.environ


def status(ok: bool, message: str) -> None:
    mark = "✅" if ok else "❌"
    if _colour_ok():
        colour = GREEN if ok else RED
        print(f"{colour}{mark} {message}{RESET}", file=sys.stderr)
    else:
        print(f"{mark} {message}", file=sys.stderr)


class ArgumentParser(argparse.ArgumentParser):
    """Prints the full help, not just usage, before exiting 2."""

    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(2, f"\n{self.prog}: error: {message}\n")


@contextlib.contextmanager
def output(path: str | None, binary: bool = False) -> Iterator[TextIO]:
    if path is None or path == "-":
        yield sys.stdout.buffer if binary else sys.stdout
        return
    with open(path, "wb" if binary else "w", encoding=None if binary else "utf-8") as fh:
        yield fh


@contextlib.contextmanager
def source(path: str) -> Iterator[TextIO]:
    if path == "-":
        yield sys.stdin
        return
    with open(path, encoding="utf-8") as fh:
        yield fh


def _json_dump(payload, fh: TextIO) -> None:
    fh.write(json.dumps(payload, indent=2) + "\n")


def _read_jsonl(fh: TextIO, name: str) -> list:
    records = []
    for lineno, line in enumerate(fh, 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise FormatError(f"{name}:{lineno}: {e}") from e
    return records


def _int_at_least(low: int):
    def parse(text: str) -> int:
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid int value: {text!r}") from None
        if value < low:
            raise argparse.ArgumentTypeError(f"must be >= {low}, got {value}")
        return value

    parse.__name__ = f"int>={low}"
    return parse


positive_int = _int_at_least(1)


def _lexicon(cfg: ToolConfig) -> textparse.Lexicon:
    return textparse.Lexicon.load(cfg.lexicon_dir) if cfg.lexicon_dir else textparse.default_lexicon()


# --- subcommands ---

def cmd_parse(args, cfg: ToolConfig) -> int:
    lexicon = _lexicon(cfg)
    captions = list(args.caption or [])
    if args.input or not captions:
        with source(args.input or "-") as fh:
            captions.extend(line.rstrip("\n") for line in fh if line.strip())
    with output(args.out) as out:
        for caption in captions:
            out.write(json.dumps(textparse.parse(caption, lexicon).to_dict()) + "\n")
    status(True, f"parsed {len(captions)} caption(s)")
    return 0


def _embedding_pairs(args, lexicon) -> Iterator[tuple[textparse.ParsedCaption, np.ndarray]]:
    parsed = None
    if args.parsed:
        with source(args.parsed) as fh:
            records = _read_jsonl(fh, args.parsed)
        try:
            parsed = [textparse.ParsedCaption.from_dict(r) for r in records]
        except (IndexError, KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{args.parsed}: not a parsed caption record ({type(e).__name__}: {e})") from e

    if embio.is_binary(args.embeddings):
        if parsed is None:
            raise FormatError("binary embeddings carry no captions; pass --parsed")
        with open(args.embeddings, "rb") as fh:
            blocks = list(embio.iter_blocks(fh))
        if len(blocks) != len(parsed):
            raise FormatError(f"{len(parsed)} parsed captions but {len(blocks)} embedding blocks")
        yield from zip(parsed, blocks)
        return

    with open(args.embeddings, encoding="utf-8") as fh:
        rows = list(embio.iter_jsonl(fh))
    if parsed is not None and len(parsed) != len(rows):
        raise FormatError(f"{len(parsed)} parsed captions but {len(rows)} embedding records")
    for i, (caption, emb) in enumerate(rows):
        yield (parsed[i] if parsed is not None else textparse.parse(caption, lexicon)), emb


def cmd_merge(args, cfg: ToolConfig) -> int:
    boost = negtome.BoostConfig(beta=cfg.beta, cue_lexicon_override=cfg.cue_file)
    n = 0
    binary = args.format == "binary"
    with output(args.out, binary=binary) as out:
        for parsed, emb in _embedding_pairs(args, _lexicon(cfg)):
            merged = negtome.merge(parsed, emb, boost)
            if binary:
                embio.write_block(out, merged.rows)
            else:
                embio.write_jsonl(out, parsed.raw, merged.to_dict())
            n += 1
    status(True, f"merged {n} caption(s) with beta={cfg.beta}")
    return 0


def cmd_amplify(args, cfg: ToolConfig) -> int:
    with source(args.direction) as fh:
        try:
            direction = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"{args.direction}: {e}") from e
    boost = negtome.BoostConfig(beta=cfg.beta, cue_lexicon_override=cfg.cue_file)
    held = n = 0
    with output(args.out) as out:
        for parsed, emb in _embedding_pairs(args, _lexicon(cfg)):
            report = negtome.amplification_check(parsed, emb, boost, direction)
            ok = report.holds()
            out.write(json.dumps({"caption": parsed.raw, "holds": ok, **report.to_dict()}) + "\n")
            held += ok
            n += 1
    status(held == n, f"amplification bound holds for {held} of {n} caption(s)")
    return 0 if held == n else 1


def cmd_adapter_check(args, cfg: ToolConfig) -> int:
    worst = adapter.gradient_check(trials=args.trials, max_d=args.max_d, max_r=args.max_r,
                                   step=args.step, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    d = args.max_d
    layer = adapter.LoraLinear.init(rng.normal(size=(d, d)), rank=min(args.max_r, d), rng=rng)
    X = rng.normal(size=(64, d))
    Y = X @ layer.W.T + np.maximum(X @ rng.normal(size=(d, 1)), 0) @ rng.normal(size=(1, d))
    losses = adapter.fit_toy(layer, X, Y, steps=args.fit_steps)
    report = {
        "max_relative_error": worst,
        "tolerance": args.tolerance,
        "passed": worst < args.tolerance,
        "trials": args.trials,
        "toy_fit": {"initial_loss": losses[0], "final_loss": losses[-1], "steps": len(losses)},
        "placement": {s.value: list(adapter.placement(s)) for s in adapter.Scheme},
    }
    if args.scheme:
        report["selected"] = {"scheme": args.scheme, "blocks": list(adapter.placement(args.scheme))}
    with output(args.out) as out:
        _json_dump(report, out)
    status(report["passed"], f"gradient check: max relative error {worst:.3g}")
    return 0 if report["passed"] else 1


def cmd_eval(args, cfg: ToolConfig) -> int:
    dets = metrics.load_detections(args.detections)
    qs = metrics.load_queries(args.queries)
    settings = metrics.EvalSettings(
        iou_thresh=cfg.iou_thresh,
        score_thresh=cfg.score_thresh,
        protocol=cfg.protocol,
        max_dets=cfg.max_dets,
        nms=args.nms,
    )
    report = metrics.evaluate(dets, qs, settings)
    with output(args.out) as out:
        _json_dump(report.to_dict(), out)
    print(report.table(), file=sys.stderr)
    return 0


def cmd_nms(args, cfg: ToolConfig) -> int:
    dets = metrics.load_detections(args.detections)
    kept = metrics.nms_per_image(dets, cfg.iou_thresh)
    with output(args.out) as out:
        for det in kept:
            out.write(json.dumps(det.to_dict()) + "\n")
    status(True, f"kept {len(kept)} of {len(dets)} detections")
    return 0


def _client(args, cfg: ToolConfig, model: str) -> clients.ModelClient:
    if args.mock_fixtures:
        return clients.MockClient(Path(args.mock_fixtures))
    if args.client == "ollama":
        client = clients.OllamaClient(model=model)
        client.ensure_model()
        return client
    if args.client == "llamacpp":
        if not (args.model_path and args.clip_model_path):
            raise clients.ClientError("--client llamacpp needs --model-path and --clip-model-path")
        return clients.LlamaCppClient(args.model_path, args.clip_model_path)
    return clients.HttpClient.from_env(cfg.endpoint_env, cfg.api_key_env, cfg.request_timeout)


def cmd_build_dataset(args, cfg: ToolConfig) -> int:
    with source(args.annotations) as fh:
        images = list(read_annotations(fh))
    generator = _client(args, cfg, cfg.generator_model)
    vqa = generator if args.mock_fixtures or args.client != "ollama" else _client(args, cfg, cfg.vqa_model)
    build_cfg = builder.BuildConfig(
        split=args.split,
        seed=args.seed,
        retry_limit=cfg.retry_limit,
        max_area_ratio=cfg.max_area_ratio,
        max_instances=cfg.max_instances,
        parallelism=cfg.parallelism,
        generator_model=cfg.generator_model,
        vqa_model=cfg.vqa_model,
        skip_align_without_siblings=args.skip_align_without_siblings,
        image_dir=Path(args.images) if args.images else None,
        render_dir=Path(args.render_dir) if args.render_dir else None,
    )
    result = builder.DatasetBuilder(generator, vqa, build_cfg, _lexicon(cfg)).build(images)
    with output(args.out) as out:
        builder.write_records(result.records, out)
    if args.summary:
        with output(args.summary) as out:
            _json_dump(result.summary, out)
    status(True, f"{result.summary['records']} records from {result.summary['images']} images")
    return 0


def cmd_stats(args, cfg: ToolConfig) -> int:
    captions = (c for path in args.corpus for c in stats.iter_corpus(path))
    report = stats.corpus_stats(captions, _lexicon(cfg))
    with output(args.out) as out:
        _json_dump(report.to_dict(), out)
    status(True, f"negation frequency {report.negation_frequency:.2f}%")
    return 0


def cmd_posthoc(args, cfg: ToolConfig) -> int:
    dets = metrics.load_detections(args.detections)
    qs = metrics.load_queries(args.queries)
    client = _client(args, cfg, cfg.vqa_model)

    def loader(image_id: str):
        return load_image_ref(str(Path(args.images) / f"{image_id}.jpg")) if args.images else None

    def image_ref(image_id: str) -> str:
        return str(Path(args.images) / f"{image_id}.jpg") if args.images else image_id

    by_caption: dict[str, list[metrics.Detection]] = {}
    for det in dets:
        by_caption.setdefault(det.caption_id, []).append(det)
    kept = []
    for caption_id in sorted(by_caption, key=metrics.id_key):
        try:
            text = qs.query(caption_id).text
        except KeyError:
            raise FormatError(f"detections name caption {caption_id!r}, absent from {args.queries}") from None
        group = by_caption[caption_id]
        if args.mode == "crop":
            kept += posthoc.crop_verify(group, text, client, args.k, loader, cfg.vqa_model)
        else:
            kept += posthoc.coordinate_prompt(group, text, client, args.k, image_ref, cfg.vqa_model)
    with output(args.out) as out:
        for det in kept:
            out.write(json.dumps(det.to_dict()) + "\n")
    status(True, f"{args.mode}: kept {len(kept)} of {len(dets)} detections")
    return 0


def cmd_diag_attn(args, cfg: ToolConfig) -> int:
    with source(args.attention) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"{args.attention}: {e}") from e
    if "classes" in data:
        classes = data["classes"]
    elif "caption" in data:
        lexicon = _lexicon(cfg)
        classes = [t.tag for t in textparse.tag(textparse.tokenize(data["caption"], lexicon), lexicon)]
    else:
        raise FormatError("attention file needs 'classes' or 'caption'")
    diag = adapter.attention_by_class(data["blocks"], classes)
    payload = diag.to_dict()
    if args.scheme:
        payload["adapted_blocks"] = list(adapter.placement(args.scheme))
    with output(args.out) as out:
        _json_dump(payload, out)
    return 0


def cmd_mcq(args, cfg: ToolConfig) -> int:
    with source(args.scores) as fh:
        items = _read_jsonl(fh, args.scores)
    result = metrics.mcq_accuracy(items)
    with output(args.out) as out:
        _json_dump(result, out)
    if result["accuracy"] is not None:
        status(True, f"MCQ accuracy {result['accuracy']:.1f}% over {result['answered']} question(s)")
    return 0


def cmd_flickr_convert(args, cfg: ToolConfig) -> int:
    n = 0
    with output(args.out) as out:
        for image in flickr.convert_dir(args.annotations_dir, args.sentences_dir):
            out.write(image.model_dump_json() + "\n")
            n += 1
    status(True, f"converted {n} image(s)")
    return 0


# --- parser ---

def build_parser() -> ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with ToolConfig keys")
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug")
    common.add_argument("--out", help="output file (default: stdout)")

    parser = ArgumentParser(prog="neggrounding", description="Negation-aware grounding toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("parse", parents=[common], help="tokenize, tag and chunk captions")
    p.add_argument("caption", nargs="*")
    p.add_argument("--input", help="file with one caption per line ('-' for stdin)")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("merge", parents=[common], help="negation-boosted phrase merging")
    p.add_argument("--embeddings", required=True, help="EMB1 binary or JSONL embeddings")
    p.add_argument("--parsed", help="JSONL from 'parse' (required for binary embeddings)")
    p.add_argument("--beta", type=float)
    p.add_argument("--cue-file", type=Path, help="cue lexicon replacing the shipped cues.txt")
    p.add_argument("--format", choices=["jsonl", "binary"], default="jsonl", help="output encoding")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("amplify", parents=[common], help="cue share of a linear read-out before and after merging")
    p.add_argument("--embeddings", required=True, help="EMB1 binary or JSONL embeddings")
    p.add_argument("--parsed", help="JSONL from 'parse' (required for binary embeddings)")
    p.add_argument("--direction", required=True, help="linear read-out as a JSON list, one weight per embedding dimension")
    p.add_argument("--beta", type=float)
    p.add_argument("--cue-file", type=Path, help="cue lexicon replacing the shipped cues.txt")
    p.set_defaults(func=cmd_amplify)

    p = sub.add_parser("adapter-check", parents=[common], help="adapter gradient check and toy fit")
    p.add_argument("--trials", type=positive_int, default=50)
    p.add_argument("--max-d", type=_int_at_least(2), default=8)
    p.add_argument("--max-r", type=positive_int, default=4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--fit-steps", type=positive_int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scheme", choices=[s.value for s in adapter.Scheme])
    p.set_defaults(func=cmd_adapter_check)

    p = sub.add_parser("eval", parents=[common], help="AP / NMS-AP / AR / FPR report")
    p.add_argument("--detections", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--iou-thresh", type=float)
    p.add_argument("--score-thresh", type=float)
    p.add_argument("--protocol", choices=[x.value for x in metrics.Protocol])
    p.add_argument("--max-dets", type=int)
    p.add_argument("--nms", action=argparse.BooleanOptionalAction, default=True,
                   help="apply class-ignored NMS before counting FPR")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("nms", parents=[common], help="class-ignored NMS per image")
    p.add_argument("--detections", required=True)
    p.add_argument("--iou-thresh", type=float)
    p.set_defaults(func=cmd_nms)

    client_opts = argparse.ArgumentParser(add_help=False)
    client_opts.add_argument("--mock-fixtures", help="directory of canned responses")
    client_opts.add_argument("--client", choices=["http", "ollama", "llamacpp"], default="http")
    client_opts.add_argument("--model-path", help="GGUF model for --client llamacpp")
    client_opts.add_argument("--clip-model-path", help="projector GGUF for --client llamacpp")

    p = sub.add_parser("build-dataset", parents=[common, client_opts], help="generate the negation dataset")
    p.add_argument("--annotations", required=True)
    p.add_argument("--split", choices=sorted(builder.SPLITS), default="S")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--retry-limit", type=int)
    p.add_argument("--max-area-ratio", type=float)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--images", help="directory of <image_id>.jpg files")
    p.add_argument("--render-dir", help="write rasterized overlays here")
    p.add_argument("--summary", help="write the build summary JSON here")
    p.add_argument("--skip-align-without-siblings", action="store_true")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("stats", parents=[common], help="negation statistics of a caption corpus")
    p.add_argument("corpus", nargs="+")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("posthoc", parents=[common, client_opts], help="VQA filtering of detections")
    p.add_argument("--detections", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--mode", choices=["crop", "coordinate"], required=True)
    p.add_argument("--k", type=positive_int, default=10)
    p.add_argument("--images", help="directory of <image_id>.jpg files")
    p.set_defaults(func=cmd_posthoc)

    p = sub.add_parser("diag-attn", parents=[common], help="attention mass per word class")
    p.add_argument("--attention", required=True, help="JSON {blocks, classes | caption}")
    p.add_argument("--scheme", choices=[s.value for s in adapter.Scheme])
    p.set_defaults(func=cmd_diag_attn)

    p = sub.add_parser("mcq", parents=[common], help="max-logit multiple-choice selection")
    p.add_argument("--scores", required=True, help="JSONL {question_id, scores, answer?}")
    p.set_defaults(func=cmd_mcq)

    p = sub.add_parser("flickr-convert", parents=[common], help="Flickr30k Entities to annotations JSONL")
    p.add_argument("--annotations-dir", required=True)
    p.add_argument("--sentences-dir", required=True)
    p.set_defaults(func=cmd_flickr_convert)
    return parser


_OVERRIDES = ("beta", "iou_thresh", "score_thresh", "protocol", "max_dets", "retry_limit",
              "max_area_ratio", "parallelism", "cue_file")


def configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("neggrounding").setLevel(level)


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging(args.verbose)
    try:
        overrides = {key: getattr(args, key, None) for key in _OVERRIDES}
        cfg = load_config(args.config, overrides)
        return args.func(args, cfg)
    except NegGroundingError as e:
        logger.debug("command failed", exc_info=True)
        status(False, f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        status(False, f"{type(e).__name__}: {e}")
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
