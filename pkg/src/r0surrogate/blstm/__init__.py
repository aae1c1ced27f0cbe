"""LSTM surrogate with Monte Carlo dropout."""

from .model import (FEATURES, WINDOW, BlstmConfig, BlstmModel, Normalizer, NumericalError,
                    SequenceSample, SequenceSet, make_sequences, mc_predict, rollout_predict,
                    train)

__all__ = ["FEATURES", "WINDOW", "BlstmConfig", "BlstmModel", "Normalizer", "NumericalError",
           "SequenceSample", "SequenceSet", "make_sequences", "mc_predict", "rollout_predict",
           "train"]
