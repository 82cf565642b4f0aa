"""Batch front door: caption, paragraph, chat REPL, and serve.

Exit codes: 0 success, 2 usage error, 3 backend error. Diagnostics go to
stderr; results (text or one structured JSON record) go to stdout.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import chat as chat_mod
from .backends import BackendSet, ScriptedRefiner, mock_backends, remote_backends
from .errors import CapengineError, EmptyControl
from .geometry import BoxRegion, LabeledPoint, VisualControl, raster_dims
from .paragraph import ParagraphOptions, caption_everything, paragraph_to_wire
from .pipeline import CaptionRequest, caption_object, render_result
from .prompts import LanguageControls

USAGE_ERROR = 2
BACKEND_ERROR = 3


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _load_image(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _parse_point(text: str) -> LabeledPoint:
    x, y = (int(v) for v in text.split(","))
    return LabeledPoint(x, y)


def _parse_box(text: str) -> BoxRegion:
    x0, y0, x1, y1 = (int(v) for v in text.split(","))
    return BoxRegion(x0, y0, x1, y1)


def _parse_traj(text: str) -> list[tuple[float, float]]:
    points = []
    for chunk in text.split(";"):
        x, y = (float(v) for v in chunk.split(","))
        points.append((x, y))
    return points


def _control_from_args(args: argparse.Namespace) -> VisualControl:
    given = [
        name
        for name, value in (("point", args.point), ("box", args.box), ("traj", args.traj))
        if value
    ]
    if len(given) != 1:
        raise ValueError("give exactly one control: --point, --box, or --traj")
    if args.point:
        return VisualControl.from_points([_parse_point(p) for p in args.point])
    if args.box:
        return VisualControl.from_box(_parse_box(args.box))
    return VisualControl.from_trajectory(_parse_traj(args.traj))


def _controls_from_args(args: argparse.Namespace) -> LanguageControls:
    return LanguageControls(
        sentiment=args.sentiment,
        length=args.length,
        language=args.lang,
        factuality=args.factuality,
    )


def _build_backends(args: argparse.Namespace) -> BackendSet:
    if args.mock:
        refiner = None
        if getattr(args, "script", None):
            refiner = ScriptedRefiner.from_file(args.script)
        return mock_backends(refiner=refiner)
    from .service import load_service_config

    config = load_service_config(getattr(args, "config", None))
    if all(c.mode == "mock" for c in config.backends.values()):
        raise ValueError(
            "no remote backends configured; pass --mock or point --config/CAPENGINE_* at endpoints"
        )
    return remote_backends(config.backends)


def _add_control_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--point", action="append", metavar="X,Y")
    parser.add_argument("--box", metavar="X0,Y0,X1,Y1")
    parser.add_argument("--traj", metavar="X1,Y1;X2,Y2;...")


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--image", required=True, metavar="PATH")
    parser.add_argument("--mock", action="store_true", help="use deterministic in-process backends")
    parser.add_argument("--config", metavar="PATH", help="backend config file for remote mode")


def cmd_caption(args: argparse.Namespace) -> int:
    try:
        image = _load_image(args.image)
    except (OSError, ValueError) as exc:
        return _fail(f"cannot read image: {exc}", USAGE_ERROR)
    try:
        control = _control_from_args(args)
        controls = _controls_from_args(args)
        backends = _build_backends(args)
    except (ValueError, OSError) as exc:
        return _fail(str(exc), USAGE_ERROR)
    request = CaptionRequest(
        control=control, controls=controls, use_cot=not args.no_cot, refine=not args.no_refine
    )
    try:
        result = caption_object(image, request, backends)
    except EmptyControl as exc:
        return _fail(str(exc), USAGE_ERROR)
    except CapengineError as exc:
        return _fail(str(exc), BACKEND_ERROR)
    if args.format == "structured":
        print(json.dumps(render_result(result, "high", mask_id="m1")))
    else:
        print(result.caption)
    return 0


def cmd_paragraph(args: argparse.Namespace) -> int:
    try:
        image = _load_image(args.image)
    except (OSError, ValueError) as exc:
        return _fail(f"cannot read image: {exc}", USAGE_ERROR)
    try:
        backends = _build_backends(args)
        opts = ParagraphOptions(max_regions=args.max_regions)
    except (ValueError, OSError) as exc:
        return _fail(str(exc), USAGE_ERROR)
    try:
        result = caption_everything(image, backends, opts=opts)
    except CapengineError as exc:
        return _fail(str(exc), BACKEND_ERROR)
    if args.format == "structured":
        print(json.dumps(paragraph_to_wire(result)))
    else:
        print(result.paragraph)
    return 0


def cmd_chat(args: argparse.Namespace) -> int:
    try:
        image = _load_image(args.image)
    except (OSError, ValueError) as exc:
        return _fail(f"cannot read image: {exc}", USAGE_ERROR)
    try:
        control = _control_from_args(args)
        backends = _build_backends(args)
    except (ValueError, OSError) as exc:
        return _fail(str(exc), USAGE_ERROR)
    try:
        seeded = caption_object(
            image, CaptionRequest(control=control, refine=False), backends
        )
        session = chat_mod.start_session(
            "cli", raster_dims(image), seeded.mask, seeded.raw_caption
        )
    except EmptyControl as exc:
        return _fail(str(exc), USAGE_ERROR)
    except CapengineError as exc:
        return _fail(str(exc), BACKEND_ERROR)
    print(f"object: {seeded.raw_caption}", file=sys.stderr)
    for line in sys.stdin:
        message = line.strip()
        if not message:
            continue
        try:
            reply, tool_calls, _ = chat_mod.chat_turn(session, message, image, backends)
        except CapengineError as exc:
            return _fail(str(exc), BACKEND_ERROR)
        for call in tool_calls:
            print(f"[{call.tool}] {call.input} -> {call.output}", file=sys.stderr)
        print(reply)
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app, load_service_config

    try:
        config = load_service_config(args.config)
        app = create_app(config)
    except (ValueError, OSError) as exc:
        return _fail(f"invalid config: {exc}", USAGE_ERROR)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capengine")
    sub = parser.add_subparsers(dest="command", required=True)

    p_caption = sub.add_parser("caption", help="caption one selected object")
    _add_common_flags(p_caption)
    _add_control_flags(p_caption)
    p_caption.add_argument("--sentiment", choices=("positive", "negative", "neutral"), default="neutral")
    p_caption.add_argument("--length", type=int, default=None, metavar="N")
    p_caption.add_argument("--lang", default="en", metavar="TAG")
    p_caption.add_argument("--factuality", choices=("factual", "imagination"), default="factual")
    p_caption.add_argument("--no-cot", action="store_true")
    p_caption.add_argument("--no-refine", action="store_true")
    p_caption.add_argument("--format", choices=("text", "structured"), default="text")
    p_caption.set_defaults(func=cmd_caption)

    p_paragraph = sub.add_parser("paragraph", help="caption everything into a paragraph")
    _add_common_flags(p_paragraph)
    p_paragraph.add_argument("--max-regions", type=int, default=20, metavar="N")
    p_paragraph.add_argument("--format", choices=("text", "structured"), default="text")
    p_paragraph.set_defaults(func=cmd_paragraph)

    p_chat = sub.add_parser("chat", help="chat about one selected object (REPL on stdin)")
    _add_common_flags(p_chat)
    _add_control_flags(p_chat)
    p_chat.add_argument("--script", metavar="FILE", help="scripted refiner responses, one per line")
    p_chat.set_defaults(func=cmd_chat)

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--config", metavar="PATH", default=None)
    p_serve.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
