from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Sequence

import pandas as pd

from snerf import __version__
from snerf.config import SNerfParams
from snerf.evaluate import (
    evaluate,
    run_ablation,
    select_test_views,
    sun_sweep,
    training_views,
)
from snerf.field import load_field
from snerf.geometry import OrthoCamera, SceneBounds, SolarDirection
from snerf.oracle import (
    SCENE_PRESETS,
    SceneSpec,
    acquisition_table,
    generate_scene,
    read_dataset,
    render_ground_truth,
    write_dataset,
)
from snerf.render import (
    Lighting,
    RenderConfig,
    render_view,
    write_float_planes,
    write_png,
)
from snerf.train import (
    Mode,
    TrainConfig,
    TrainSet,
    TrainState,
    load_train_state,
    save_train_state,
    train,
)
from snerf.utils import SNerfError, error, resolve_threads

LOGGER = logging.getLogger(__name__)

USAGE = '''S-NeRF: shadow-aware neural radiance fields for satellite imagery

USAGE:
    snerf help         --- show this message
    snerf version      --- report version number
    snerf config show  [--config NAME]
                       --- print the consolidated configuration
    snerf gen-scene    --preset P --seed S --out DIR
                       --- synthesize a scene and its ground truth
    snerf train        --scene DIR --config NAME --mode M --out DIR
                       [--resume CKPT]
    snerf render       --checkpoint CKPT --view V --sun SUN --out DIR
                       [--scene DIR] [--albedo] [--shadow] [--depth]
    snerf eval         --checkpoint CKPT --scene DIR --out DIR
    snerf ablation     --preset P --seeds 0 1 2 --out DIR
    snerf sweep-sun    --checkpoint CKPT --from SUN --to SUN --steps N
                       --view V --out DIR [--scene DIR]

Modes: nerf, snerf_no_sc, snerf_sc.
Scene presets: slab, single_box, blocks, courtyard, transient.
A view is an acquisition index of --scene or OFF_NADIR,AZIMUTH; a sun is
an acquisition index or ELEVATION,AZIMUTH (degrees).

Every command takes --threads N (default: SNERF_THREADS or all cores);
--threads 1 makes runs bit-reproducible.
'''

RUN_MANIFEST = 'run.json'


@dataclass
class RunManifest:
    """What a command read and wrote, enough to rerun it."""

    command: str
    config_hash: str | None = None
    seed: int | None = None
    scene: str | None = None
    checkpoints: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    started: str = field(default_factory=lambda: _now())
    finished: str | None = None

    def write(self, out_dir: str) -> str:
        missing = [
            p for p in self.checkpoints + self.outputs if not os.path.exists(p)
        ]
        if missing:
            error(f'Declared outputs were not written: {", ".join(missing)}')
        self.finished = _now()
        path = os.path.join(out_dir, RUN_MANIFEST)
        with open(path, 'w') as f:
            json.dump(dataclasses.asdict(self), f, indent=2, sort_keys=True)
        for p in self.checkpoints + self.outputs:
            LOGGER.info(f'{self.command}: wrote {p}')
        LOGGER.info(f'{self.command}: run manifest {path}')
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='seconds')


def _pair(text: str) -> tuple[float, float]:
    parts = text.replace(' ', '').split(',')
    if len(parts) != 2:
        raise ValueError(text)
    return float(parts[0]), float(parts[1])


def _is_index(text: str) -> bool:
    return text.strip().isdigit()


def _acquisition(scene: SceneSpec | None, text: str, what: str) -> int:
    if scene is None:
        error(f'{what} {text} is an acquisition index; give --scene too.')
    k = int(text)
    if not 0 <= k < len(scene.acquisitions):
        error(f'Scene has no acquisition {k}.')
    return k


def parse_sun(text: str, scene: SceneSpec | None = None) -> SolarDirection:
    """An acquisition index of scene, or 'elevation,azimuth'."""
    if _is_index(text):
        return scene.acquisitions[  # type: ignore[union-attr]
            _acquisition(scene, text, 'Sun')
        ].sun
    try:
        return SolarDirection(*_pair(text))
    except ValueError:
        error(f'Cannot read a sun from {text!r}; use ELEVATION,AZIMUTH.')


def parse_view(
    text: str,
    bounds: SceneBounds,
    resolution: tuple[int, int],
    scene: SceneSpec | None = None,
) -> OrthoCamera:
    """An acquisition index of scene, or 'off_nadir,azimuth'."""
    if _is_index(text):
        k = _acquisition(scene, text, 'View')
        return scene.camera(scene.acquisitions[k])  # type: ignore[union-attr]
    try:
        off_nadir, azimuth = _pair(text)
    except ValueError:
        error(f'Cannot read a view from {text!r}; use OFF_NADIR,AZIMUTH.')
    extent = (bounds.x_max - bounds.x_min, bounds.y_max - bounds.y_min)
    return OrthoCamera.looking(
        off_nadir, azimuth, bounds.center, extent, resolution
    )


def _bounds_of(meta: dict[str, Any]) -> SceneBounds:
    lo, hi = meta['box']['lo'], meta['box']['hi']
    return SceneBounds(lo[0], hi[0], lo[1], hi[1], lo[2], hi[2])


def _render_config(
    params: SNerfParams, threads: int | None, lighting: Lighting
) -> RenderConfig:
    return RenderConfig(
        n_coarse=params['sampling.n_coarse'],
        n_fine=params['sampling.n_fine'],
        hierarchical=params['sampling.hierarchical'],
        lighting=lighting,
        threads=resolve_threads(threads),
    )


def _mode_of(meta: dict[str, Any], default: str = 'snerf_sc') -> Mode:
    return Mode.parse(meta.get('training', {}).get('mode', default))


def cmd_config_show(args: argparse.Namespace) -> None:
    params = SNerfParams(name=args.config, verbose=False)
    print(params.consolidated_toml(), end='')
    print(f'# config hash: {params.config_hash()}')


def cmd_gen_scene(args: argparse.Namespace) -> None:
    if args.preset not in SCENE_PRESETS:
        error(
            f'Unknown scene preset {args.preset!r}; choose one of:'
            f' {", ".join(SCENE_PRESETS)}.'
        )
    manifest = RunManifest('gen-scene', seed=args.seed)
    scene = generate_scene(
        args.preset, args.seed, tuple(args.resolution), args.acquisitions
    )
    bundle = render_ground_truth(scene)
    manifest.outputs = write_dataset(scene, bundle, args.out)
    table_path = os.path.join(args.out, 'acquisitions.csv')
    acquisition_table(scene).to_csv(table_path, index_label='index')
    manifest.outputs.append(table_path)
    manifest.scene = os.path.join(args.out, 'scene.json')
    manifest.write(args.out)
    print(f'Scene {scene.name} written to {args.out}.')


def cmd_train(args: argparse.Namespace) -> None:
    params = SNerfParams(name=args.config)
    config = TrainConfig.from_params(params, args.mode)
    scene, bundle = read_dataset(args.scene)
    test = select_test_views(scene)
    train_set = TrainSet.from_scene(
        scene, bundle, training_views(scene, test)
    )
    os.makedirs(args.out, exist_ok=True)
    manifest = RunManifest(
        'train',
        config_hash=params.config_hash(),
        seed=config.seed,
        scene=args.scene,
    )
    config_path = os.path.join(args.out, 'config.toml')
    params.write_consolidated_toml(config_path)

    resume: TrainState | None = None
    if args.resume:
        resume = load_train_state(args.resume)
    result = train(
        config,
        train_set,
        resume=resume,
        checkpoint_dir=os.path.join(args.out, 'checkpoints'),
    )
    history = result.history
    loss_path = os.path.join(args.out, 'loss.csv')
    if resume is not None and os.path.exists(loss_path):
        earlier = pd.read_csv(loss_path)
        earlier = earlier[earlier['iteration'] < resume.iteration]
        history = pd.concat([earlier, history], ignore_index=True)
    history.to_csv(loss_path, index=False)

    checkpoint = os.path.join(args.out, 'field.ckpt')
    save_train_state(
        checkpoint,
        TrainState(
            result.field, result.adam, result.iteration, config.mode
        ),
        config,
    )
    manifest.checkpoints = result.checkpoints + [checkpoint]
    manifest.outputs = [loss_path, config_path]
    manifest.write(args.out)
    print(f'Trained {config.mode.value} field written to {checkpoint}.')


def cmd_render(args: argparse.Namespace) -> None:
    field_, meta = load_field(args.checkpoint)
    scene = SceneSpec.load(args.scene) if args.scene else None
    bounds = scene.bounds if scene else _bounds_of(meta)
    resolution = scene.resolution if scene else tuple(args.resolution)
    camera = parse_view(args.view, bounds, resolution, scene)
    sun = parse_sun(args.sun, scene)
    mode = _mode_of(meta)
    params = SNerfParams(name=args.config, verbose=False)
    image = render_view(
        field_,
        camera,
        sun,
        bounds,
        _render_config(params, args.threads, mode.lighting),
    )
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out, args.name)
    outputs = [f'{stem}.png', f'{stem}.rgb.f32']
    write_png(outputs[0], image.rgb)
    write_float_planes(outputs[1], image.rgb)
    if args.albedo:
        outputs += [f'{stem}.albedo.png', f'{stem}.albedo.f32']
        write_png(outputs[-2], image.albedo)
        write_float_planes(outputs[-1], image.albedo)
    if args.shadow:
        if image.shadow is None:
            error('A nerf-mode field has no solar visibility to render.')
        outputs += [f'{stem}.shadow.png', f'{stem}.shadow.f32']
        write_png(outputs[-2], image.shadow)
        write_float_planes(outputs[-1], image.shadow)
    if args.depth:
        outputs += [f'{stem}.altitude.png', f'{stem}.altitude.f32']
        span = bounds.h_max - bounds.h_min
        write_png(outputs[-2], (image.altitude - bounds.h_min) / span)
        write_float_planes(outputs[-1], image.altitude)
    manifest = RunManifest(
        'render',
        config_hash=params.config_hash(),
        scene=args.scene,
        checkpoints=[args.checkpoint],
        outputs=outputs,
    )
    manifest.write(args.out)
    print(f'Rendered {len(outputs)} files to {args.out}.')


def cmd_eval(args: argparse.Namespace) -> None:
    field_, meta = load_field(args.checkpoint)
    scene, bundle = read_dataset(args.scene)
    mode = Mode.parse(args.mode) if args.mode else _mode_of(meta)
    params = SNerfParams(name=args.config, verbose=False)
    report = evaluate(
        field_,
        scene,
        bundle,
        select_test_views(scene),
        mode,
        _render_config(params, args.threads, mode.lighting),
        panel_dir=os.path.join(args.out, 'panels'),
    )
    outputs = report.write(args.out)
    print(report.summary())
    RunManifest(
        'eval',
        config_hash=params.config_hash(),
        scene=args.scene,
        checkpoints=[args.checkpoint],
        outputs=outputs,
    ).write(args.out)


def cmd_ablation(args: argparse.Namespace) -> None:
    params = SNerfParams(name=args.config)
    table = run_ablation(
        args.preset,
        args.seeds,
        params,
        args.out,
        threads=resolve_threads(args.threads),
    )
    print(table.to_string(index=False))
    RunManifest(
        'ablation',
        config_hash=params.config_hash(),
        seed=args.seeds[0],
        outputs=[
            os.path.join(args.out, 'ablation.csv'),
            os.path.join(args.out, 'ablation_median.csv'),
        ],
    ).write(args.out)


def cmd_sweep_sun(args: argparse.Namespace) -> None:
    field_, meta = load_field(args.checkpoint)
    scene = SceneSpec.load(args.scene) if args.scene else None
    bounds = scene.bounds if scene else _bounds_of(meta)
    resolution = scene.resolution if scene else tuple(args.resolution)
    camera = parse_view(args.view, bounds, resolution, scene)
    start, end = parse_sun(args.sun_from, scene), parse_sun(args.sun_to, scene)
    mode = _mode_of(meta)
    params = SNerfParams(name=args.config, verbose=False)
    sweep = sun_sweep(
        field_,
        camera,
        bounds,
        start,
        end,
        args.steps,
        _render_config(params, args.threads, mode.lighting),
    )
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for step, image in enumerate(sweep.images):
        path = os.path.join(args.out, f'sweep_{step:03d}.png')
        write_png(path, image.rgb)
        outputs.append(path)
    table_path = os.path.join(args.out, 'brightness.csv')
    sweep.table.to_csv(table_path, index=False)
    outputs.append(table_path)
    RunManifest(
        'sweep-sun',
        config_hash=params.config_hash(),
        scene=args.scene,
        checkpoints=[args.checkpoint],
        outputs=outputs,
    ).write(args.out)
    print(
        f'{args.steps} renders written to {args.out};'
        f' darkening ratio {sweep.darkening_ratio:.3f}.'
    )


class UsageParser(argparse.ArgumentParser):
    def format_help(self) -> str:
        return USAGE


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(prog='snerf', add_help=False)
    sub = parser.add_subparsers(dest='command')

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--threads', type=int, default=None)
    configured = argparse.ArgumentParser(add_help=False)
    configured.add_argument('--config', default=None)

    config = sub.add_parser('config', parents=[configured])
    config.add_argument('action', choices=['show'])

    gen = sub.add_parser('gen-scene', parents=[common])
    gen.add_argument('--preset', required=True)
    gen.add_argument('--seed', type=int, default=0)
    gen.add_argument('--out', required=True)
    gen.add_argument('--resolution', type=int, nargs=2, default=[64, 64])
    gen.add_argument('--acquisitions', type=int, default=10)

    tr = sub.add_parser('train', parents=[common, configured])
    tr.add_argument('--scene', required=True)
    tr.add_argument('--mode', default=None)
    tr.add_argument('--out', required=True)
    tr.add_argument('--resume', default=None)

    viewing = argparse.ArgumentParser(add_help=False)
    viewing.add_argument('--checkpoint', required=True)
    viewing.add_argument('--view', required=True)
    viewing.add_argument('--scene', default=None)
    viewing.add_argument('--out', required=True)
    viewing.add_argument('--resolution', type=int, nargs=2, default=[64, 64])

    ren = sub.add_parser('render', parents=[common, configured, viewing])
    ren.add_argument('--sun', required=True)
    ren.add_argument('--name', default='render')
    ren.add_argument('--albedo', action='store_true')
    ren.add_argument('--shadow', action='store_true')
    ren.add_argument('--depth', action='store_true')

    ev = sub.add_parser('eval', parents=[common, configured])
    ev.add_argument('--checkpoint', required=True)
    ev.add_argument('--scene', required=True)
    ev.add_argument('--out', required=True)
    ev.add_argument('--mode', default=None)

    ab = sub.add_parser('ablation', parents=[common, configured])
    ab.add_argument('--preset', default='blocks', choices=SCENE_PRESETS)
    ab.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2])
    ab.add_argument('--out', required=True)

    sw = sub.add_parser('sweep-sun', parents=[common, configured, viewing])
    sw.add_argument('--from', dest='sun_from', required=True)
    sw.add_argument('--to', dest='sun_to', required=True)
    sw.add_argument('--steps', type=int, default=9)
    return parser


COMMANDS = {
    'config': cmd_config_show,
    'gen-scene': cmd_gen_scene,
    'train': cmd_train,
    'render': cmd_render,
    'eval': cmd_eval,
    'ablation': cmd_ablation,
    'sweep-sun': cmd_sweep_sun,
}


def main(argv: Sequence[str] | None = None) -> None:
    logging.basicConfig(level=logging.INFO)
    args = list(sys.argv[1:] if argv is None else argv)
    if not args or args[0].lower() in ('help', '--help', '-h'):
        print(USAGE)
        return
    if args[0].lower() in ('version', '--version', '-v'):
        print(__version__)
        return
    if args[0] not in COMMANDS:
        print(f'*** Unknown command: {" ".join(args)}\n', file=sys.stderr)
        print(USAGE, file=sys.stderr)
        sys.exit(2)
    namespace = build_parser().parse_args(args)
    try:
        COMMANDS[namespace.command](namespace)
    except SNerfError as e:
        print(f'*** {e}', file=sys.stderr)
        sys.exit(1)


if __name__ == '__main__':
    main()
