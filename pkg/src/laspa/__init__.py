"""Language-agnostic speaker embeddings with prefix-tuned cross-attention fusion."""

from .features import FeatureConfig, MelSpectrogram, Waveform, mel_spectrogram, resample
from .synthcorpus import CorpusSpec, TrialList, Utterance, generate_corpus, make_trials
from .encoders import EncoderConfig, Embedding
from .fusion import AttentionConfig
from .decoder import DecoderConfig
from .losses import LossReport
from .training import ModelConfig, ModelState, OptimizerConfig, init_state, train, train_step, infer_speaker_embedding, grad_check
from .eval import DcfConfig, ScoreSet, eer, min_dcf, score_trials, slr_probe, run_ablation

__version__ = "0.1.0"

__all__ = [
    "FeatureConfig", "MelSpectrogram", "Waveform", "mel_spectrogram", "resample",
    "CorpusSpec", "TrialList", "Utterance", "generate_corpus", "make_trials",
    "EncoderConfig", "Embedding", "AttentionConfig", "DecoderConfig", "LossReport",
    "ModelConfig", "ModelState", "OptimizerConfig", "init_state", "train", "train_step",
    "infer_speaker_embedding", "grad_check",
    "DcfConfig", "ScoreSet", "eer", "min_dcf", "score_trials", "slr_probe", "run_ablation",
]
