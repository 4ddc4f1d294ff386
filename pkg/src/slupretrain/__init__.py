"""Pre-trained phoneme/word speech encoders for end-to-end spoken language understanding."""

from .dataset import Intent, SlotVocabulary, Utterance, load_audio, parse_manifest
from .estimators import PretrainedEncoder, SLUClassifier
from .model import ModelConfig, SLUModel, build_model, desk_config, tiny_config
from .training import finetune, pretrain

__version__ = "0.1.0"
