"""Sentence encoding: width-2 convolution over word vectors, ReLU, masked max-pool."""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .embeddings import EmbeddingTable, tokenize
from .errors import ConfigError, InputError
from .nninit import uniform_fan_in


@dataclass
class SentenceMatrix:
    """Word vectors for one sentence stacked into a fixed-height matrix.

    rows: (l_max, dim) float32; rows at index >= length are zero padding.
    """

    rows: torch.Tensor
    length: int


def embed_sentence(sentence, table: EmbeddingTable, l_max):
    """Tokenize `sentence` and stack the word vectors, zero-padded to l_max rows."""
    tokens = tokenize(sentence)
    if not tokens:
        raise InputError(f"sentence {sentence!r} contains no tokens")
    if len(tokens) > l_max:
        raise InputError(f"sentence has {len(tokens)} tokens, the limit is {l_max}")
    rows = torch.zeros(l_max, table.dim, dtype=torch.float32)
    for i, tok in enumerate(tokens):
        rows[i] = torch.from_numpy(np.asarray(table.lookup(tok), dtype=np.float32))
    return SentenceMatrix(rows=rows, length=len(tokens))


class TextEncoder(nn.Module):
    """Interface: (padded word rows, token counts) -> one vector per sentence."""

    def forward(self, rows, lengths):
        raise NotImplementedError


class ConvTextEncoder(TextEncoder):
    """Width-2 convolution with ReLU and a max-pool over real token windows.

    Window i covers rows (i, i+1). The pool runs over windows i < length, so
    the window pairing the last word with the first padding row is included,
    while windows made purely of padding are not; adding more padding rows
    can therefore never change the output.
    """

    def __init__(self, dim, generator=None):
        super().__init__()
        if dim < 1:
            raise ConfigError(f"text dim must be positive, got {dim}")
        self.dim = dim
        self.weight = nn.Parameter(uniform_fan_in((dim, 2 * dim), fan_in=2 * dim, generator=generator))
        self.bias = nn.Parameter(uniform_fan_in((dim,), fan_in=2 * dim, generator=generator))

    def window_scores(self, rows):
        """Linear score of every width-2 window, before the ReLU and the pool."""
        windows = torch.cat([rows[:, :-1, :], rows[:, 1:, :]], dim=2)
        return windows @ self.weight.t() + self.bias

    def forward(self, rows, lengths):
        if rows.dim() != 3:
            raise ConfigError(f"expected rows of shape (batch, l_max, dim), got {tuple(rows.shape)}")
        _, l_max, dim = rows.shape
        if dim != self.dim:
            raise ConfigError(f"word vectors have dim {dim}, encoder expects {self.dim}")
        if l_max < 2:
            raise ConfigError("need l_max >= 2 so the width-2 window has at least one position")
        lengths = torch.as_tensor(lengths, dtype=torch.long, device=rows.device)
        u = torch.relu(self.window_scores(rows))
        n_pos = l_max - 1
        valid = torch.arange(n_pos, device=rows.device).unsqueeze(0) < lengths.clamp(max=n_pos).unsqueeze(1)
        u = u.masked_fill(~valid.unsqueeze(2), float("-inf"))
        return u.max(dim=1).values


def encode_text(matrix: SentenceMatrix, encoder: TextEncoder):
    """Encode a single SentenceMatrix to a (dim,) sentence vector."""
    rows = matrix.rows.unsqueeze(0)
    lengths = torch.tensor([matrix.length])
    return encoder(rows, lengths).squeeze(0)
