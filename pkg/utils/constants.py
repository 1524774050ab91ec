"""
Application constants
"""
# Objective names accepted in configs and on the command line
LOSS_KINDS = (
    'nce',
    'mil-nce',
    'max-nce',
    'attn-nce',
    'cat-nce',
    'max-margin',
    'binary-ce',
)

# Losses whose value is maximized (log-ratio objectives)
NCE_FAMILY = ('nce', 'mil-nce', 'max-nce', 'attn-nce', 'cat-nce')

# Negative sampling modes and the ablation row labels they stand for
NEG_MODES = {
    'joint': '(x,y)',
    'text_given_video': '(y|x)',
    'video_given_text': '(x|y)',
}

BAG_SIDES = ('text', 'video')

PROBE_FEATURES = ('embedding', 'trunk')

# Stable exit codes for scripted runs
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_GRADCHECK = 4
EXIT_ARTIFACT = 5

CORPUS_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b'MILNCE\x00\x01'

# Finite-difference settings used by the gradient checker
GRADCHECK_STEP = 1e-5
GRADCHECK_TOLERANCE = 1e-6


def is_maximized(loss_kind):
    """True when the loss kind reports an objective to maximize"""
    return loss_kind in NCE_FAMILY
