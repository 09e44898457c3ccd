"""
latentmatch - Latent matching models for query-document search

Learns linear maps from queries and document titles into a shared latent
space from click-through data:
- Click-log ingestion and sparse cross-covariance accumulation
- Synonym and tag-term mining as regularizing knowledge
- Coordinate-descent and gradient-descent training
- Latent, combined and BM25 ranking
- NDCG evaluation with head/tail query splits
"""

__version__ = "1.0.0"
__author__ = "latentmatch developers"

from .corpus import CorpusBundle, CrossCovariance, TermVector, Vocabulary
from .knowledge import ClickGraph, KnowledgeMatrix, SynonymPair, TagTermPair
from .trainer import MappingPair, TrainConfig, TrainReport, train
from .scorer import DocumentCollection, Model, RankedList, Ranker, ScoreMode
from .evaluation import EvalReport, evaluate_run, ndcg_at_k

__all__ = [
    'CorpusBundle',
    'CrossCovariance',
    'TermVector',
    'Vocabulary',
    'ClickGraph',
    'KnowledgeMatrix',
    'SynonymPair',
    'TagTermPair',
    'MappingPair',
    'TrainConfig',
    'TrainReport',
    'train',
    'DocumentCollection',
    'Model',
    'RankedList',
    'Ranker',
    'ScoreMode',
    'EvalReport',
    'evaluate_run',
    'ndcg_at_k',
]
