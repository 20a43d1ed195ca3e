"""Discrete tag-set conditions for the toy denoiser and embedder."""

from dataclasses import dataclass

FINDINGS = (
    "disease_blob",
    "disease_patch",
    "drain_line",
    "edema",
    "pacemaker",
    "consolidation",
)
SITES = ("site_a", "site_b")
NO_FINDINGS = "no_findings"
VOCABULARY = FINDINGS + SITES + (NO_FINDINGS,)


@dataclass(frozen=True)
class Condition:
    """An ordered, non-empty set of tags drawn from ``VOCABULARY``.

    Use ``None`` (not an empty Condition) for the unconditional prompt.
    """

    tags: tuple

    def __init__(self, tags):
        if isinstance(tags, str):
            tags = tags.replace(",", " ").split()
        unknown = sorted(set(tags) - set(VOCABULARY))
        if unknown:
            raise ValueError(f"unknown tags: {unknown}")
        tags = tuple(sorted(set(tags), key=VOCABULARY.index))
        if not tags:
            raise ValueError("a Condition needs at least one tag")
        if NO_FINDINGS in tags and any(tag in FINDINGS for tag in tags):
            raise ValueError("no_findings cannot be combined with finding tags")
        object.__setattr__(self, "tags", tags)

    def __str__(self):
        return " ".join(self.tags)

    def __contains__(self, tag):
        return tag in self.tags

    @property
    def findings(self):
        return tuple(tag for tag in self.tags if tag in FINDINGS)

    def with_findings(self, *findings):
        """Same site tags, findings replaced (empty -> ``no_findings``)."""
        keep = [tag for tag in self.tags if tag in SITES]
        return Condition(keep + (list(findings) or [NO_FINDINGS]))


def as_condition(value):
    if value is None or isinstance(value, Condition):
        return value
    return Condition(value)


def condition_from_findings(findings, site=None):
    tags = list(findings) or [NO_FINDINGS]
    if site is not None:
        tags.append(site)
    return Condition(tags)
