"""The four attention masks that decouple a dialogue sequence.

Channel 0 allows attention within the same utterance, channel 1 across
different utterances, channel 2 within the same speaker's utterances,
channel 3 across speakers. Padding is disallowed everywhere, both as
query and as key, so pad rows stay inert downstream.
"""

from dataclasses import dataclass

import numpy as np

LARGE = 1e9  # additive stand-in for infinity; avoids inf-inf NaNs

SAME_UTTERANCE = 0
OTHER_UTTERANCE = 1
SAME_SPEAKER = 2
OTHER_SPEAKER = 3

CHANNEL_NAMES = ("same_utterance", "other_utterance", "same_speaker", "other_speaker")


def build_masks_batch(utt_index, speaker_index, valid):
    """Boolean allow-masks for a batch: [N, 4, l, l]."""
    T = np.asarray(utt_index)
    S = np.asarray(speaker_index)
    v = np.asarray(valid, dtype=bool)
    pair = v[:, :, None] & v[:, None, :]
    same_t = T[:, :, None] == T[:, None, :]
    same_s = S[:, :, None] == S[:, None, :]
    return np.stack([pair & same_t, pair & ~same_t,
                     pair & same_s, pair & ~same_s], axis=1)


@dataclass
class ChannelMaskSet:
    allowed: np.ndarray   # bool [4, l, l]

    @property
    def additive(self):
        """0 where allowed, -LARGE where not (the add-to-logits form)."""
        return np.stack([additive_form(m) for m in self.allowed])

    def __getitem__(self, k):
        return self.allowed[k]


def build_masks(seq):
    """ChannelMaskSet for one EncodedSequence."""
    batch = build_masks_batch(seq.utt_index[None], seq.speaker_index[None],
                              seq.valid[None])
    return ChannelMaskSet(allowed=batch[0])


def additive_form(mask):
    mask = np.asarray(mask, dtype=bool)
    return np.where(mask, 0.0, -LARGE)


def format_mask(mask):
    """Render a boolean matrix as rows of 0/1 characters."""
    return "\n".join("".join("1" if x else "0" for x in row) for row in np.asarray(mask))
