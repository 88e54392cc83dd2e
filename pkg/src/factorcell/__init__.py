"""Context-adapted recurrent language models (Unadapted, SoftmaxBias, ConcatCell, FactorCell)."""

from .checkpoint import load_checkpoint, save_checkpoint
from .context import Categorical, ContextEncoder, ContextSchema, Numeric, build_schema, embed_context, encode_raw
from .data import Corpus, Document, Vocabulary, build_vocab, load_jsonl, make_batches, preprocess
from .evaluation import (classify, classify_corpus, export_context_embeddings, log_likelihood_ratio,
                         perplexity, top_boosted_words)
from .model import AdaptedCell, CellState, LanguageModel, ModelConfig, adapt, cell_step, compute_adaptation
from .training import TrainConfig, train

__version__ = "0.1.0"
