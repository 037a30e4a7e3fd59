from snerf.config import SNerfParams
from snerf.field import SNerfField, init_siren, load_field
from snerf.oracle import SceneSpec, generate_scene, render_ground_truth
from snerf.render import RenderConfig, render_view
from snerf.train import Mode, TrainConfig, TrainSet, train

__all__: list[str] = [
    'Mode',
    'RenderConfig',
    'SNerfField',
    'SNerfParams',
    'SceneSpec',
    'TrainConfig',
    'TrainSet',
    'generate_scene',
    'init_siren',
    'load_field',
    'render_ground_truth',
    'render_view',
    'train',
]

__version__ = '0.1.0'
