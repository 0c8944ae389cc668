"""Reference-chain-free listener for the PhotoBook collaborative dialogue game.

Subpackages by concern: gamedata (logs, instances, splits), textalign
(tokens + dense labels), features (relevance + image features), listener
(the conditioned model), baseline, refchain, trainer, analysis, service.
"""

__version__ = "0.1.0"
