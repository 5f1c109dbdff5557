"""Video memorability prediction with surrogate synthesized images.

The pipeline turns video metadata into text prompts, synthesizes one
surrogate image per video through a pluggable backend, extracts and stacks
frame embeddings, trains Bayesian-ridge and small gradient-trained
regressors of memorability, and scores the train-domain x test-domain run
matrix with Spearman rank correlation and prediction-distribution analysis.
"""

__version__ = "0.1.0"
