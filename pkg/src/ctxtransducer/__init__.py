"""Contextual-utterance and dual-mode transducer training lab."""
