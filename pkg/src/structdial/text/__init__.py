from .corpus import Candidate, DialogueExample, Utterance, load_corpus, save_corpus
from .corruption import (
    CorruptionRecord,
    MaskedTokens,
    PermutedContext,
    apply_mlm_mask,
    corrupt,
    make_nsp_pair,
    permute_utterances,
    restore_order,
)
from .sequence import InputSequence, assemble, assemble_sequence
from .svo import extract_svo
from .vocab import Vocab, build_vocab, tokenize
