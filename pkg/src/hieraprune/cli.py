"""Command-line front end.

Subcommands: gen, segment, merge, prune, pipeline, flops, compare.  Every
command is pure given its inputs, flags, and seed; outputs are JSON or HVTK
files written atomically (temp + rename).  Wall-clock timings go to stderr
so output files stay byte-reproducible.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import dataclass

import numpy as np

from .budget import allocate_ratios, segment_budgets
from .cost import ModelDims, pipeline_flops
from .dpp import prune_tokens, relevance
from .errors import BadShape, ConfigError, HieraPruneError, SegmentMismatch
from .merge import apply_merge, plan_merge
from .pipeline import (
    FileProvider,
    PruneSchedule,
    SyntheticProvider,
    baseline_random,
    baseline_relevance_only,
    run_pipeline,
)
from .segmentation import SegmentMap, global_topk_mask, segment, similarity_stack
from .tensors import (
    InstructionEmbedding,
    VideoTokens,
    read_tensor_file,
    write_tensor_file,
)

_CONFIG_KEYS = {
    "n_stages",
    "boundaries",
    "r_merge",
    "r_prune",
    "r_var",
    "lambda",
    "beta",
    "seed",
    "provider",
    "model_dims",
}


@dataclass
class RunConfig:
    """Validated pipeline configuration."""

    schedule: PruneSchedule
    provider: str = "synthetic"
    seed: int = 0

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"--config: cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--config: {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("--config: top level must be a JSON object")
        unknown = sorted(set(raw) - _CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"--config: unknown key {unknown[0]!r}")
        provider = raw.get("provider", "synthetic")
        if provider not in ("file", "synthetic"):
            raise ConfigError(f"provider: must be 'file' or 'synthetic', got {provider!r}")
        dims_raw = raw.get("model_dims", None)
        kwargs = {}
        if dims_raw is not None:
            if not (isinstance(dims_raw, (list, tuple)) and len(dims_raw) == 3):
                raise ConfigError("model_dims: expected [layers, hidden, intermediate]")
            kwargs["dims"] = ModelDims(*[int(v) for v in dims_raw])
        for key, attr in (
            ("n_stages", "n_stages"),
            ("boundaries", "boundaries"),
            ("r_merge", "r_merge"),
            ("r_prune", "r_prune"),
            ("r_var", "r_var"),
            ("lambda", "lam"),
            ("beta", "beta"),
            ("seed", "seed"),
        ):
            if key in raw:
                kwargs[attr] = raw[key]
        schedule = PruneSchedule(**kwargs)
        return cls(schedule=schedule, provider=provider, seed=schedule.seed)


def write_json(obj, path) -> None:
    """Atomic, diffable JSON: two-space indent, LF endings, insertion order."""
    text = json.dumps(obj, indent=2) + "\n"
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _load_json_arg(value: str, flag: str):
    """Accept inline JSON or a path to a JSON file."""
    text = value.strip()
    if text.startswith("[") or text.startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{flag}: invalid inline JSON: {exc}") from exc
    try:
        with open(value, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{flag}: cannot read {value}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{flag}: {value} is not valid JSON: {exc}") from exc


def _read_video(path, flag: str = "--video") -> VideoTokens:
    tensor = read_tensor_file(path)
    if not isinstance(tensor, VideoTokens):
        raise ConfigError(f"{flag}: {path} does not hold a video tensor")
    return tensor


def _read_instruction(path, flag: str = "--instr") -> InstructionEmbedding:
    tensor = read_tensor_file(path)
    if not isinstance(tensor, InstructionEmbedding):
        raise ConfigError(f"{flag}: {path} does not hold an instruction vector")
    return tensor


def gen_synthetic(frames: int, grid: tuple[int, int], dim: int, blocks: int, seed: int):
    """Synthetic video with planted segment structure.

    ``blocks`` contiguous stretches of near-identical frames, consecutive
    stretches living in disjoint embedding subspaces so cross-stretch token
    similarity is exactly zero.  Returns (video, instruction, meta); meta
    records the planted boundaries and a merge ratio whose top-K mask marks
    exactly the within-stretch entries.
    """
    h, w = grid
    if frames < 1 or h < 1 or w < 1 or dim < 1:
        raise BadShape(f"frames/grid/dim must be positive, got {frames}, {grid}, {dim}")
    if blocks < 1 or blocks > frames:
        raise BadShape(f"blocks must be in [1, frames], got {blocks}")
    if dim < blocks:
        raise BadShape(f"dim {dim} too small for {blocks} orthogonal blocks")

    rng = np.random.default_rng(seed)
    if blocks == 1:
        starts = [0]
    else:
        cuts = np.sort(rng.choice(np.arange(1, frames), size=blocks - 1, replace=False))
        starts = [0] + [int(c) for c in cuts]
    ends = starts[1:] + [frames]

    chunk = dim // blocks
    data = np.zeros((frames, h, w, dim), dtype=np.float32)
    for b, (s, e) in enumerate(zip(starts, ends)):
        cols = slice(b * chunk, (b + 1) * chunk)
        base = rng.standard_normal((h, w, chunk))
        base /= np.linalg.norm(base, axis=-1, keepdims=True)
        for t in range(s, e):
            noise = 1e-3 * rng.standard_normal((h, w, chunk))
            data[t, :, :, cols] = (base + noise).astype(np.float32)

    instruction = InstructionEmbedding(rng.standard_normal(dim).astype(np.float32))
    n = frames * h * w
    meta = {
        "frames": frames,
        "grid": [h, w],
        "dim": dim,
        "blocks": blocks,
        "seed": seed,
        "boundaries": starts,
        "suggested_merge_ratio": ((frames - blocks) * h * w + 0.5) / n,
    }
    return VideoTokens(data), instruction, meta


def _parse_grid(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ConfigError(f"--grid: expected HxW, got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise ConfigError(f"--grid: expected integers, got {text!r}") from exc


def _cmd_gen(args) -> int:
    video, instruction, meta = gen_synthetic(
        args.frames, _parse_grid(args.grid), args.dim, args.blocks, args.seed
    )
    prefix = args.out
    write_tensor_file(video, f"{prefix}.video.hvtk")
    write_tensor_file(instruction, f"{prefix}.instr.hvtk")
    write_json(meta, f"{prefix}.meta.json")
    return 0


def _segmap_to_dict(segmap: SegmentMap) -> dict:
    return {
        "boundaries": [int(b) for b in segmap.boundaries],
        "segments": [
            {"start": int(s), "end": int(e), "g": [float(x) for x in g]}
            for (s, e), g in zip(segmap.segments, segmap.g)
        ],
    }


def _cmd_segment(args) -> int:
    video = _read_video(args.video)
    stack = similarity_stack(video)
    mask = global_topk_mask(stack, args.merge_ratio, video.total_tokens)
    segmap = segment(video, mask, args.beta)
    write_json(_segmap_to_dict(segmap), args.out)
    return 0


def _cmd_merge(args) -> int:
    video = _read_video(args.video)
    stack = similarity_stack(video)
    mask = global_topk_mask(stack, args.merge_ratio, video.total_tokens)
    plan = plan_merge(video, mask)
    merged = apply_merge(video, plan)
    # HVTK has no alive-mask channel: dropped positions are zero-filled in
    # the written grid; the report carries the authoritative counts.
    out = merged.data.copy()
    out.reshape(-1, merged.dim)[plan.dropped_ids] = 0.0
    write_tensor_file(VideoTokens(out), args.out)
    write_json(plan.stats(), args.report)
    return 0


def _cmd_prune(args) -> int:
    video = _read_video(args.video)
    instruction = _read_instruction(args.instr)
    seg_raw = _load_json_arg(args.segments, "--segments")
    if not isinstance(seg_raw, dict) or "boundaries" not in seg_raw:
        raise ConfigError("--segments: expected an object with a 'boundaries' key")
    segmap = SegmentMap.from_boundaries(seg_raw["boundaries"], video)
    ratios_raw = _load_json_arg(args.ratios, "--ratios")
    if isinstance(ratios_raw, dict):
        ratios_raw = ratios_raw.get("ratios")
    if not isinstance(ratios_raw, list):
        raise ConfigError("--ratios: expected a JSON list of per-segment ratios")
    if len(ratios_raw) != segmap.n_segments:
        raise SegmentMismatch(
            f"--ratios: {len(ratios_raw)} ratios for {segmap.n_segments} segments"
        )
    # A freshly loaded video is fully alive, so token ids are row indices.
    row_sets = segmap.token_sets
    selection = prune_tokens(
        video.alive_embeddings().astype(np.float64),
        instruction.data.astype(np.float64),
        row_sets,
        [float(r) for r in ratios_raw],
    )
    write_json(
        {
            "kept": [int(i) for i in selection.kept],
            "kept_counts": selection.kept_counts(),
            "segments": [
                {
                    "kept": [int(i) for i in blk.kept],
                    "log_det_trace": [
                        None if v is None else float(v) for v in blk.log_det_trace
                    ],
                    "breakdown_step": blk.breakdown_step,
                }
                for blk in selection.blocks
            ],
        },
        args.out,
    )
    return 0


def _build_provider(config: RunConfig, hidden_states):
    if config.provider == "file":
        if not hidden_states:
            raise ConfigError("--hidden-states: required when provider is 'file'")
        return FileProvider(hidden_states)
    return SyntheticProvider(config.seed)


def _cmd_pipeline(args) -> int:
    config = RunConfig.from_file(args.config)
    video = _read_video(args.video)
    instruction = _read_instruction(args.instr)
    provider = _build_provider(config, args.hidden_states)
    report = run_pipeline(video, instruction, config.schedule, provider)
    write_json(report.to_dict(), args.out)
    phases = " ".join(f"{k}={v * 1000:.1f}ms" for k, v in report.timings.items())
    print(f"timings: {phases}", file=sys.stderr)
    return 0


def _cmd_flops(args) -> int:
    try:
        layers, hidden, inter = (int(v) for v in args.dims.split(","))
    except ValueError as exc:
        raise ConfigError(f"--dims: expected L,d,m integers, got {args.dims!r}") from exc
    counts = _load_json_arg(args.counts, "--counts")
    boundaries = _load_json_arg(args.boundaries, "--boundaries")
    result = pipeline_flops(
        counts, boundaries, ModelDims(layers, hidden, inter), args.baseline_count
    )
    payload = {
        "total": result["total"],
        "baseline": result["baseline"],
        "ratio": result["ratio"],
    }
    if args.out:
        write_json(payload, args.out)
    else:
        print(json.dumps(payload, indent=2))
    return 0


def _mean_pairwise_cosine(embeddings: np.ndarray) -> float:
    k = embeddings.shape[0]
    if k < 2:
        return 0.0
    v = embeddings.astype(np.float64)
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms < 1e-12] = 1.0
    v = v / norms
    gram = v @ v.T
    return float((gram.sum() - np.trace(gram)) / (k * (k - 1)))


def _cmd_compare(args) -> int:
    config = RunConfig.from_file(args.config)
    video = _read_video(args.video)
    instruction = _read_instruction(args.instr)
    provider = _build_provider(config, args.hidden_states)
    report = run_pipeline(video, instruction, config.schedule, provider)
    kept_pipeline = np.asarray(report.stage_kept[-1], dtype=np.int64)
    k = len(kept_pipeline)
    n0 = video.total_tokens

    kept_random = baseline_random(video, k / n0, config.seed, keep_count=k).kept
    kept_rel = baseline_relevance_only(
        video, instruction, k / n0, keep_count=k
    ).kept

    rel_all = relevance(
        video.data.reshape(-1, video.dim).astype(np.float64),
        instruction.data.astype(np.float64),
    )
    emb = video.data.reshape(-1, video.dim)

    def describe(name: str, kept: np.ndarray) -> dict:
        return {
            "name": name,
            "kept_count": int(len(kept)),
            "mean_relevance": float(rel_all.r[kept].mean()) if len(kept) else 0.0,
            "mean_pairwise_cosine": _mean_pairwise_cosine(emb[kept]),
        }

    write_json(
        {
            "budget_fraction": k / n0,
            "kept_count": k,
            "methods": [
                describe("hieraprune", kept_pipeline),
                describe("random", np.asarray(kept_random, dtype=np.int64)),
                describe("relevance_only", np.asarray(kept_rel, dtype=np.int64)),
            ],
        },
        args.out,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hieraprune",
        description="Hierarchical token pruning for video token streams",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic video with planted segments")
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--grid", required=True, help="token grid as HxW, e.g. 4x4")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--blocks", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("segment", help="segment a video at low-overlap boundaries")
    p.add_argument("--video", required=True)
    p.add_argument("--merge-ratio", type=float, required=True)
    p.add_argument("--beta", type=float, default=0.4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_segment)

    p = sub.add_parser("merge", help="temporally merge static tokens")
    p.add_argument("--video", required=True)
    p.add_argument("--merge-ratio", type=float, required=True)
    p.add_argument("--out", required=True, help="merged video (HVTK)")
    p.add_argument("--report", required=True, help="run statistics (JSON)")
    p.set_defaults(func=_cmd_merge)

    p = sub.add_parser("prune", help="segment-wise diverse token selection")
    p.add_argument("--video", required=True)
    p.add_argument("--instr", required=True)
    p.add_argument("--segments", required=True, help="segment JSON (inline or path)")
    p.add_argument("--ratios", required=True, help="per-segment ratios (inline or path)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_prune)

    p = sub.add_parser("pipeline", help="run the full staged schedule")
    p.add_argument("--config", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--instr", required=True)
    p.add_argument("--hidden-states", default=None, help="stage HVTK directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("flops", help="prefill FLOPs for a staged schedule")
    p.add_argument("--dims", required=True, help="L,d,m")
    p.add_argument("--counts", required=True, help="per-stage counts (inline or path)")
    p.add_argument("--boundaries", required=True, help="stage boundaries (inline or path)")
    p.add_argument(
        "--baseline-count",
        type=int,
        default=None,
        help="unpruned token count (default: first stage count)",
    )
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_flops)

    p = sub.add_parser("compare", help="pipeline vs. random and relevance baselines")
    p.add_argument("--config", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--instr", required=True)
    p.add_argument("--hidden-states", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except HieraPruneError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
