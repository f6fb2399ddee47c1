"""Command line front end for project pipelines.

Each subcommand opens (or, for detect, creates) a project directory, runs
one stage to completion, and exits 0 on success. Failures exit nonzero
with a structured JSON object on stderr; --json switches stdout to a
machine-readable job summary. Config values come from the project's
config file, optionally replaced by --config and overridden per-run by
repeated --set key=value flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import GridFormatError, TextureKitError
from .grid import read_grid, read_labels, write_grid
from .project import (
    JobManager,
    PipelineConfig,
    Project,
    apply_config_overrides,
    parse_config_text,
    run_stage,
)

_JOB_TIMEOUT = 3600.0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="texturekit",
        description="Detect, segment, and resynthesize texture features.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--project", required=True, help="project directory")
    common.add_argument("--config", help="config file to use for this run")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    common.add_argument("--seed", type=int, help="seed for this job")
    common.add_argument("--json", action="store_true", help="print the job summary as JSON")

    p = sub.add_parser("detect", parents=[common], help="score anomalies and binarize masks")
    p.add_argument(
        "--images",
        nargs="+",
        default=[],
        metavar="PATH",
        help="texture images (.png/.txf1 files or directories) to ingest first",
    )

    p = sub.add_parser("segment", parents=[common], help="train the embedder and label pixels")
    p.add_argument("--k", type=int, help="number of feature classes")

    p = sub.add_parser("invert", parents=[common], help="recover the noise trajectory of an image")
    p.add_argument("--image", required=True, help="image id to invert")
    p.add_argument("--steps", type=int, help="solver steps")

    for name, help_text in (
        ("synth", "synthesize a new texture"),
        ("tile", "synthesize a seamlessly tileable texture"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--width", type=int, required=True)
        p.add_argument("--height", type=int, required=True)
        p.add_argument("--labels", help="condition label map (indexed PNG)")
        p.add_argument("--steps", type=int, help="solver steps")
        p.add_argument("--out", help="also write the result to this .png/.txf1 file")
        if name == "synth":
            p.add_argument("--tileable", action="store_true", help="wrap windows for tiling")

    p = sub.add_parser("edit", parents=[common], help="regenerate brushed regions of an image")
    p.add_argument("--image", required=True, help="image id to edit")
    p.add_argument("--labels", required=True, help="brushed label map (indexed PNG)")
    p.add_argument("--mask", help="edit mask PNG (defaults to brushed labels > 0)")
    p.add_argument("--steps", type=int, help="must match the stored trajectory")
    p.add_argument("--out", help="also write the result to this .png/.txf1 file")

    p = sub.add_parser("transfer", parents=[common], help="impose a label condition on an image")
    p.add_argument("--image", required=True, help="target image id")
    p.add_argument("--labels", required=True, help="condition label map (indexed PNG)")
    p.add_argument("--mask", help="restrict the transfer to this mask PNG")
    p.add_argument("--steps", type=int, help="solver steps")
    p.add_argument("--out", help="also write the result to this .png/.txf1 file")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--root", required=True, help="directory holding the projects")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)

    return parser


def _parse_overrides(pairs: list[str]) -> dict:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise TextureKitError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _open_project(args) -> Project:
    """Open args.project, creating it for detect runs on a fresh path."""
    path = Path(args.project)
    overrides = _parse_overrides(args.overrides)
    base = None
    if args.config:
        base = parse_config_text(Path(args.config).read_text("utf-8"))
    if (path / "project.json").exists():
        project = Project.open(path.parent, path.name)
        if base is not None:
            project.config = base
        if overrides:
            project.config = apply_config_overrides(project.config, overrides)
        return project
    if args.command != "detect":
        raise TextureKitError(
            f"no project at {path}; run 'texturekit detect --project {path} --images ...' first"
        )
    return Project.create(
        path.parent, path.name, config=base or PipelineConfig(), overrides=overrides
    )


def _ingest_images(project: Project, paths: list[str]) -> list[str]:
    files: list[Path] = []
    for raw in paths:
        path = Path(raw)
        if path.is_dir():
            files.extend(sorted(p for p in path.iterdir() if p.suffix in (".png", ".txf1")))
        elif path.suffix in (".png", ".txf1"):
            files.append(path)
        else:
            raise TextureKitError(f"{path} is not a .png or .txf1 texture")
    added = []
    for path in files:
        if project.has_image(path.stem):
            continue
        project.add_image(read_grid(path), image_id=path.stem)
        added.append(path.stem)
    return added


def _read_mask_file(path: str):
    """Masks may arrive as indexed label PNGs or plain grayscale PNGs."""
    try:
        return read_labels(path).labels > 0
    except GridFormatError:
        return read_grid(path).data[:, :, 0] > 0


def _stage_params(args) -> dict:
    params: dict = {}
    if args.seed is not None:
        params["seed"] = args.seed
    command = args.command
    if command == "segment" and args.k is not None:
        params["k"] = args.k
    if command == "invert":
        params["image"] = args.image
    if command in ("synth", "tile"):
        params["height"] = args.height
        params["width"] = args.width
        if args.labels:
            params["labels"] = read_labels(args.labels).labels
        if command == "synth" and getattr(args, "tileable", False):
            params["tileable"] = True
    if command == "edit":
        params["image"] = args.image
        labels = read_labels(args.labels)
        params["labels"] = labels
        params["mask"] = _read_mask_file(args.mask) if args.mask else labels.labels > 0
    if command == "transfer":
        params["image"] = args.image
        params["labels"] = read_labels(args.labels)
        if args.mask:
            params["mask"] = _read_mask_file(args.mask)
    if command in ("invert", "synth", "tile", "edit", "transfer") and args.steps is not None:
        params["steps"] = args.steps
    return params


def _fail(error: dict, args) -> int:
    if error.get("missing_prerequisite") and args is not None:
        stage = error["missing_prerequisite"]
        hint = f"texturekit {stage} --project {args.project}"
        if stage == "invert" and getattr(args, "image", None):
            hint += f" --image {args.image}"
        error = dict(error)
        error["hint"] = hint
    print(json.dumps(error, indent=2), file=sys.stderr)
    return 1


def _run_command(args) -> int:
    project = _open_project(args)
    if args.command == "detect" and args.images:
        _ingest_images(project, args.images)
    manager = JobManager()
    job = run_stage(project, args.command, manager, _stage_params(args))
    manager.wait(job.id, timeout=_JOB_TIMEOUT)
    if job.state == "failed":
        return _fail(job.error or {"code": "internal", "message": "job failed"}, args)

    out = getattr(args, "out", None)
    if out:
        write_grid(out, project.load_image(job.result["image"]))
    if args.json:
        print(json.dumps(job.to_dict(), indent=2))
    else:
        summary = {k: v for k, v in job.result.items() if k != "seam"}
        print(f"{args.command} done: {json.dumps(summary)}")
    if "seam" in job.result and not args.json:
        print(json.dumps(job.result["seam"], indent=2))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        import uvicorn

        from .service import create_app

        uvicorn.run(create_app(args.root), host=args.host, port=args.port)
        return 0
    try:
        return _run_command(args)
    except TextureKitError as exc:
        error = {"code": _error_code(exc), "message": str(exc)}
        missing = getattr(exc, "missing_prerequisite", None)
        if missing:
            error["missing_prerequisite"] = missing
        return _fail(error, args)


def _error_code(exc: TextureKitError) -> str:
    from .project import _snake_case

    return _snake_case(type(exc).__name__)


if __name__ == "__main__":
    sys.exit(main())
