"""Attentional encoder-decoder translation with an asynchronous backward decoder.

The package is a small numpy library: a 2-D autodiff core (``tensor``),
neural building blocks (``layers``), the three-component translation model
(``model``), two-phase beam decoding (``decoding``), an RMSprop training
loop (``training``), corpus and synthetic-task utilities (``data``), BLEU
and report tooling (``evaluation``), checkpoint persistence
(``checkpoint``), and a command-line front end (``cli``).
"""

__version__ = "0.1.0"
