"""Context-aware visual storytelling via prefix tuning, at desk scale.

A trainable mapping network turns frozen image/text features into soft
prefix vectors for a small frozen causal language model. Training combines
teacher-forced NLL with an InfoNCE grounding term under a DII/SIS
curriculum; four decoding strategies generate stories whose degeneration
behavior the metrics module measures.
"""

from .autodiff import Tensor, backward, grad_check, no_grad
from .checkpoint import load_tensors, save_tensors, state_checksum
from .data import (DatasetSplits, DiiSample, SisSample, Vocab, load_dataset,
                   save_dataset, synthesize_toy_dataset, tokenize)
from .decoding import (DecodeConfig, GeneratedStory, LmSession, beam_search,
                       contrastive_search, generate_story, greedy_decode,
                       nucleus_sample, top_k_sample, write_stories_jsonl)
from .encoder import FeatureTable, FrozenEncoder, load_features, save_features
from .lm import BOS_ID, EOS_ID, PAD_ID, UNK_ID, FrozenLm, LmConfig, LmOutput
from .mapping import (AssembledInput, MappingConfig, MappingNetwork,
                      PrefixSequence, assemble_input)
from .metrics import (corpus_eval, diversity, evaluate_story, grounding_score,
                      render_table, rep_n, story_diversity, story_rep_n)
from .training import (AdamState, CurriculumState, LossReport, TrainConfig,
                       TrainResult, adam_update, combined_loss, curriculum_step,
                       infonce_loss, nll_loss, pretrain_lm, train)

__version__ = "0.1.0"
