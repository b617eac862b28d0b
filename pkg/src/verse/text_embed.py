"""Learned embedding table over the fixed caption vocabulary.

Stands in for a real text encoder: trained jointly with the generator,
deterministic at fixed parameters.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .dataset import MAX_CAPTION_TOKENS, VOCAB, Caption
from .errors import VocabularyError

PAD_ID = len(VOCAB)


class TextEmbedder(nn.Module):
    def __init__(self, dim: int = 64):
        super().__init__()
        self.dim = dim
        self.table = nn.Embedding(len(VOCAB) + 1, dim)  # +1 pad slot

    def embed(self, caption: Caption):
        """(L, dim) token embeddings and their arithmetic mean."""
        ids = torch.tensor(caption.token_ids, dtype=torch.long)
        if ids.numel() == 0:
            raise VocabularyError("caption produced no tokens")
        if int(ids.max()) >= len(VOCAB):
            raise VocabularyError("token id outside vocabulary")
        tokens = self.table(ids)
        return tokens, tokens.mean(dim=0)

    def embed_batch(self, captions, length: int = MAX_CAPTION_TOKENS):
        """Padded (B, length, dim) tokens, (B, length) mask, (B, dim) pooled.

        Pooling averages only the real tokens; pad positions use the learned
        pad row and are masked out of attention.
        """
        batch_ids = torch.full((len(captions), length), PAD_ID, dtype=torch.long)
        mask = torch.zeros(len(captions), length, dtype=torch.bool)
        for i, cap in enumerate(captions):
            ids = cap.token_ids
            if len(ids) > length:
                raise VocabularyError(f"caption longer than {length} tokens")
            batch_ids[i, : len(ids)] = torch.tensor(ids, dtype=torch.long)
            mask[i, : len(ids)] = True
        tokens = self.table(batch_ids)
        denom = mask.sum(dim=1, keepdim=True).clamp(min=1)
        pooled = (tokens * mask.unsqueeze(-1)).sum(dim=1) / denom
        return tokens, mask, pooled
