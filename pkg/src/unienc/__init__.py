"""Response selection where Bi-, Poly-, Cross- and Uni-Encoders are attention-mask
variants of one transformer, on a small numpy autodiff core."""
from ._kernels import BACKEND
from .encoder import Encoder, EncoderConfig
from .inputs import CorpusRecord, Dialogue, Utterance, Vocab
from .masks import Kind, allowed_pairs, build_mask
from .paradigms import Paradigm, RankingModel, share

__version__ = "0.1.0"

__all__ = ["BACKEND", "CorpusRecord", "Dialogue", "Encoder", "EncoderConfig", "Kind", "Paradigm",
           "RankingModel", "Utterance", "Vocab", "allowed_pairs", "build_mask", "share"]
