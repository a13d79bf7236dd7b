"""Streaming state-space encoder for multichannel EEG.

Reference NumPy implementation of the encoder (recurrent and parallel forms),
its preprocessing and streaming runtime, self-supervised objectives, a
synthetic data generator, metrics and a deep linear gradient-flow lab.
"""

from .encoder import MICRO_CONFIG, FULL_CONFIG, Encoder, EncoderState, ModelConfig
from .runtime import StreamSession, run_recording, session_step
from .synth import Recording, SynthSpec, gen_recording

__version__ = "0.1.0"

__all__ = [
    "Encoder", "EncoderState", "ModelConfig", "MICRO_CONFIG", "FULL_CONFIG",
    "StreamSession", "run_recording", "session_step",
    "Recording", "SynthSpec", "gen_recording",
]
