"""Dialogue language modeling with utterance-order and sentence-backbone objectives."""
