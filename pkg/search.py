"""
Candidate search strategies.

A search turns a window descriptor into either a rejection or a set of
template ids to validate. The forest is the fast path; the exhaustive scan
is the baseline the forest is measured against.
"""
import logging

from errors import ConfigError
from forest import Candidates

logger = logging.getLogger(__name__)


class CandidateSearch:
    """
    Base class for candidate searches.
    """
    name = "base"

    def __init__(self, store):
        self.store = store

    def find(self, descriptor):
        """
        Returns forest.Rejected or forest.Candidates for one window descriptor.
        Must be implemented by subclasses.
        """
        raise NotImplementedError("CandidateSearch subclasses must implement find")


class ForestSearch(CandidateSearch):
    """
    Descends every tree of a trained forest; rejected windows never reach validation.
    """
    name = "forest"

    def __init__(self, store, forest):
        super().__init__(store)
        forest.check_layout(store)
        self.forest = forest

    def find(self, descriptor):
        return self.forest.query(descriptor)


class ExhaustiveSearch(CandidateSearch):
    """
    Returns every template. Its cost is that of scanning all of them: one
    comparison per foreground coordinate of every template.
    """
    name = "exhaustive"

    def __init__(self, store):
        super().__init__(store)
        self._all = frozenset(int(i) for i in store.ids)
        self._cost = int(store.fg_masks.sum())

    def find(self, descriptor):
        return Candidates(self._all, comparisons=self._cost, lookups=0, depth=0)


def get_search(name, store, forest=None):
    name = name.lower()
    if name == "forest":
        if forest is None:
            raise ConfigError("forest search needs a trained forest")
        return ForestSearch(store, forest)
    elif name == "exhaustive":
        return ExhaustiveSearch(store)
    else:
        raise ConfigError(f"Unknown search type: {name}")
