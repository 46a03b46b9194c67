"""rlqfs: query-focused abstractive summarization trained with policy gradients.

Subpackages and modules:
    ndgrad          dense tensors with reverse-mode autodiff and optimizers
    model           miniature transformer summarizer and passage encoder
    decode          greedy / sampling / beam / two-pass generation
    rewards         ROUGE-L, BLEU, and embedding-similarity reward functions
    train           mixed MLE + policy-gradient training loop
    passage_embed   dual-encoder passage-embedding trainer
    corpus          tokenization, corpora, forum-dump ingestion
    cli             operator command line
"""

__version__ = "0.1.0"
