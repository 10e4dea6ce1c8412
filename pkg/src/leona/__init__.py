"""Zero-shot slot filling engine.

Tags utterance spans with slot types it has never seen in training by
pairing a slot-independent IOB tagger with a context-aware similarity
model over natural-language slot descriptions.
"""

__version__ = "0.1.0"
