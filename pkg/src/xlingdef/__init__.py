"""xlingdef: cross-lingual definition modeling on synthetic languages.

A small encoder-decoder transformer with per-language prompt vectors and a
shared soft task prompt, trained from scratch in f64 numpy. A contrastive
objective pushes same-task prompt states together across languages and away
from language-identity states, and the synthetic corpora make the two
failure modes it targets (answering in the wrong language, echoing the
context instead of defining) mechanically measurable.
"""

__version__ = "0.1.0"
