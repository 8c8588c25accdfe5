"""Command-line entry point: ``avatarkit <subcommand> [--config FILE] [--key value ...]``.

Every ``PipelineConfig`` field is also a flag; flags win over the config
file.  Training subcommands require ``--seed``.  Each run writes
``manifest.json`` into its output folder.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .pipeline import PipelineConfig, PipelineError, write_manifest

log = logging.getLogger("avatarkit")

TRAINING = {"train-a2e", "train-renderer"}


def _add_config_flags(p: argparse.ArgumentParser, seed_required: bool) -> None:
    g = p.add_argument_group("configuration (override --config)")
    g.add_argument("--config", help="plain-text key = value file")
    for f in fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "seed":
            g.add_argument(flag, dest="cfg_seed", type=int, metavar="INT", required=seed_required,
                           help="random seed" + (" (required)" if seed_required else ""))
            continue
        g.add_argument(flag, dest=f"cfg_{f.name}", metavar=type(f.default).__name__.upper(),
                       help=f"default {f.default!r}")


def _config(args) -> PipelineConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return PipelineConfig.load(args.config, overrides)


def _table(cfg: PipelineConfig):
    from .audio_features import EmotionTable
    return EmotionTable.load(cfg.emotions) if cfg.emotions else EmotionTable.default()


def _model(cfg: PipelineConfig, dataset_root=None):
    from .face_model import load_model, make_head_model
    if cfg.model:
        return load_model(cfg.model)
    if dataset_root is not None and (Path(dataset_root) / "model.npz").exists():
        return load_model(Path(dataset_root) / "model.npz")
    return make_head_model()


def _write_curves(out: Path, curves, keys, title):
    from .audio2expression import write_curves
    from .plotting import plot_loss_curves
    write_curves(out / "curves.csv", curves)
    if curves:
        plot_loss_curves(curves, out / "curves.png", keys, title)
    return [out / "curves.csv", out / "curves.png"]


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_synth_data(args, cfg: PipelineConfig):
    from .pipeline import write_synthetic_dataset
    from .synthetic import SyntheticScenario, synth_dataset

    sc = SyntheticScenario(seed=cfg.seed, n_clips=cfg.synth_clips, frames_per_clip=cfg.synth_frames,
                           resolution=cfg.resolution, audio_rate=cfg.synth_audio_rate, fps=cfg.fps,
                           one_to_many=cfg.synth_one_to_many, blinks=cfg.synth_blinks,
                           pose_motion=cfg.synth_pose_motion, texture_audio=cfg.synth_texture_audio,
                           mfcc=cfg.mfcc_config())
    table = _table(cfg)
    ds = synth_dataset(sc, _model(cfg), table)
    written = write_synthetic_dataset(ds, args.out, table)
    return {}, written


def cmd_track(args, cfg: PipelineConfig):
    from .pipeline import read_frames
    from .tracker import fit_fixed, fit_sequence, save_track

    model = _model(cfg)
    frames = read_frames(args.frames)
    tcfg, priors = cfg.tracker_config(), cfg.tracking_priors()
    pi_fix, _, _ = fit_fixed(frames[:tcfg.n_fixed_frames], model, priors, tcfg)
    result = fit_sequence(frames, model, pi_fix, priors, tcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_track(out, result)
    log.info("tracked %d frames; mean photometric %.3g", len(result), float(np.mean(result.losses)))
    return {"frames": Path(args.frames)}, [out]


def _a2e_samples(root, cfg: PipelineConfig, model, table):
    from .audio2expression import A2ESample, pack_pi_var
    from .audio_features import encode_emotion, mfcc_for_video
    from .pipeline import open_dataset
    from .tracker import load_track

    _, clips = open_dataset(root)
    samples = []
    for c in clips:
        wave, rate = c.audio()
        lab = c.label()
        label = encode_emotion(lab["emotion"], lab["intensity"], table).vector
        for path in c.tracks():
            tr = load_track(path)
            target = np.stack([pack_pi_var(p, model.n_joints, model.n_expr) for p in tr.pi_var])
            mfcc = mfcc_for_video(wave, rate, len(tr), cfg.mfcc_config()).matrix
            samples.append(A2ESample(mfcc, label, target, f"{c.name}/{path.stem}"))
    return samples


def cmd_train_a2e(args, cfg: PipelineConfig):
    from .audio2expression import train_a2e

    table = _table(cfg)
    model = _model(cfg, args.data)
    samples = _a2e_samples(args.data, cfg, model, table)
    a2e_cfg = cfg.a2e_config(model.n_joints, model.n_expr, table.dim)
    out = Path(args.out)
    res = train_a2e(samples, a2e_cfg, seed=cfg.seed, out_dir=out, resume=args.resume)
    written = list(res.checkpoints) + _write_curves(out, res.curves, ("total", "l1", "gan", "vel", "disc"),
                                                    "audio-to-expression")
    return {"data": Path(args.data) / "dataset.json", "resume": args.resume}, written


def cmd_infer_a2e(args, cfg: PipelineConfig):
    from .audio2expression import load_a2e
    from .audio_features import encode_emotion, n_video_frames, read_wav
    from .pipeline import predicted_pi_var
    from .tracker import TrackResult, load_track, save_track

    a2e = load_a2e(args.checkpoint)
    wave, rate = read_wav(args.audio)
    n = n_video_frames(len(wave), rate, cfg.fps)
    label = encode_emotion(args.emotion, args.intensity, _table(cfg)).vector
    pi_var = predicted_pi_var(a2e, wave, rate, n, label, cfg.mfcc_config())
    pi_fix = load_track(args.reference).pi_fix if args.reference else {}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_track(out, TrackResult(pi_fix, pi_var, np.zeros(n), np.ones(n, dtype=bool)))
    return {"checkpoint": Path(args.checkpoint), "audio": Path(args.audio)}, [out]


def _renderer_clips(root, cfg: PipelineConfig, model, top=None):
    from .audio_features import restrict_and_resample, select_top_phonemes
    from .neural_renderer import RendererClip, rasterize_track
    from .pipeline import open_dataset
    from .tracker import load_track

    _, folders = open_dataset(root)
    raw = [f.phonemes() for f in folders]
    if top is None:
        top, coverage = select_top_phonemes([r[0] for r in raw], cfg.renderer_config().n_phonemes)
        log.info("top phoneme classes cover %.4f of the probability mass", coverage)
    clips = []
    for f, (probs, fps, _) in zip(folders, raw):
        tr = load_track(f.tracks()[0])
        frames = f.frames()
        uv, alpha = rasterize_track(model, tr.pi_fix, tr.pi_var, frames.shape[1])
        clips.append(RendererClip(uv, alpha, frames, restrict_and_resample(probs, top, fps).probs, f.name))
    return clips, np.asarray(top), [r[2] for r in raw][0]


def cmd_train_renderer(args, cfg: PipelineConfig):
    from .neural_renderer import save_renderer, train_renderer

    model = _model(cfg, args.data)
    clips, top, names = _renderer_clips(args.data, cfg, model)
    out = Path(args.out)
    res = train_renderer(clips, cfg.renderer_config(), seed=cfg.seed, out_dir=out, resume=args.resume)
    final = save_renderer(out / "renderer.ckpt", res.model, phoneme_classes=[int(i) for i in top],
                          phoneme_names=[names[i] for i in top], seed=cfg.seed)
    written = list(res.checkpoints) + [final] + _write_curves(out, res.curves, ("total", "l1", "perc", "gan", "disc"),
                                                              "renderer")
    return {"data": Path(args.data) / "dataset.json", "resume": args.resume}, written


def _renderer_with_classes(path):
    from .checkpoint import load_checkpoint
    from .neural_renderer import load_renderer

    _, meta = load_checkpoint(path, kind="renderer")
    if "phoneme_classes" not in meta:
        raise PipelineError(f"{path} does not record its phoneme classes; use the final renderer.ckpt")
    return load_renderer(path), np.asarray(meta["phoneme_classes"])


def cmd_render(args, cfg: PipelineConfig):
    from .audio_features import read_phoneme_stream, restrict_and_resample
    from .neural_renderer import RendererClip, rasterize_track, render_clip
    from .pipeline import read_frames, write_frames
    from .tracker import load_track

    renderer, top = _renderer_with_classes(args.checkpoint)
    model = _model(cfg)
    tr = load_track(args.track)
    frames = read_frames(args.frames)[:len(tr)]
    if len(frames) < len(tr):
        raise PipelineError(f"{args.frames} has {len(frames)} frames but the track has {len(tr)}")
    probs, fps, _ = read_phoneme_stream(args.phonemes)
    uv, alpha = rasterize_track(model, tr.pi_fix, tr.pi_var, frames.shape[1])
    clip = RendererClip(uv, alpha, frames, restrict_and_resample(probs, top, fps).probs)
    written = write_frames(args.out, render_clip(renderer, clip))
    return {"checkpoint": Path(args.checkpoint), "track": Path(args.track), "phonemes": Path(args.phonemes)}, written


def cmd_generate(args, cfg: PipelineConfig):
    from .audio2expression import load_a2e
    from .audio_features import read_phoneme_stream, read_wav, restrict_and_resample
    from .pipeline import ClipFolder, GenerationInputs, generate_video, write_frames
    from .tracker import load_track

    renderer, top = _renderer_with_classes(args.renderer)
    a2e = load_a2e(args.a2e)
    ref = ClipFolder(Path(args.reference))
    tr = load_track(ref.tracks()[0])
    wave, rate = read_wav(args.audio)
    probs, fps, _ = read_phoneme_stream(args.phonemes)
    inputs = GenerationInputs(wave, rate, restrict_and_resample(probs, top, fps), args.emotion, args.intensity,
                              tr.pi_fix, tr.pi_var, ref.frames())
    res = generate_video(inputs, a2e, renderer, _model(cfg), cfg, _table(cfg))
    written = write_frames(Path(args.out) / "frames", res.frames)
    return {"audio": Path(args.audio), "phonemes": Path(args.phonemes), "a2e": Path(args.a2e),
            "renderer": Path(args.renderer), "reference": ref.tracks()[0]}, written


def cmd_eval_emd(args, cfg: PipelineConfig):
    from .metrics import PREDICTORS, emotion_emd, series_from_tree, write_emd_report
    from .pipeline import read_frames
    from .plotting import plot_emd_bars

    if cfg.predictor not in PREDICTORS:
        raise PipelineError(f"unknown predictor {cfg.predictor!r}; available: {sorted(PREDICTORS)}")
    predictor = PREDICTORS[cfg.predictor]()
    gen = series_from_tree(args.gen, predictor, read_frames)
    real = series_from_tree(args.real, predictor, read_frames)
    res = emotion_emd(gen, real, pool=cfg.pool_frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_emd_report(res, out / "emd_groups.csv", out / "emd_summary.json")
    plot_emd_bars(res, out / "emd_groups.png")
    print(json.dumps({"A-EMD": res.a_emd, "V-EMD": res.v_emd}))
    return {}, [out / "emd_groups.csv", out / "emd_summary.json", out / "emd_groups.png"]


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avatarkit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        return sp

    sp = add("synth-data", cmd_synth_data, "write a procedural dataset with known ground truth")
    sp.add_argument("--out", required=True)
    sp = add("track", cmd_track, "fit face parameters to a PNG frame sequence")
    sp.add_argument("--frames", required=True)
    sp.add_argument("--out", required=True, help="output track .npz")
    sp = add("train-a2e", cmd_train_a2e, "train the audio-to-expression GAN")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume")
    sp = add("infer-a2e", cmd_infer_a2e, "predict a parameter track from audio and an emotion")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--audio", required=True)
    sp.add_argument("--emotion", default="neutral")
    sp.add_argument("--intensity", type=float, default=1.0)
    sp.add_argument("--reference", help="track whose fixed parameters are copied into the output")
    sp.add_argument("--out", required=True)
    sp = add("train-renderer", cmd_train_renderer, "train the neural texture and renderer")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume")
    sp = add("render", cmd_render, "render a parameter track over background frames")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--track", required=True)
    sp.add_argument("--frames", required=True)
    sp.add_argument("--phonemes", required=True)
    sp.add_argument("--out", required=True)
    sp = add("generate", cmd_generate, "audio + emotion -> video frames over a reference clip")
    sp.add_argument("--audio", required=True)
    sp.add_argument("--phonemes", required=True)
    sp.add_argument("--emotion", default="neutral")
    sp.add_argument("--intensity", type=float, default=1.0)
    sp.add_argument("--reference", required=True, help="clip folder with track.npz and frames/")
    sp.add_argument("--a2e", required=True)
    sp.add_argument("--renderer", required=True)
    sp.add_argument("--out", required=True)
    sp = add("eval-emd", cmd_eval_emd, "valence/arousal EMD between generated and real video trees")
    sp.add_argument("--gen", required=True)
    sp.add_argument("--real", required=True)
    sp.add_argument("--out", required=True)

    for name, sp in sub.choices.items():
        _add_config_flags(sp, seed_required=name in TRAINING)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        inputs, outputs = args.func(args, cfg)
    except (PipelineError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out_dir = out if out.suffix == "" else out.parent
    inputs = {k: v for k, v in inputs.items() if v is not None}
    if cfg.model:
        inputs["model"] = Path(cfg.model)
    write_manifest(out_dir, args.command, cfg, argv, inputs, outputs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
