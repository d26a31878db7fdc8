"""Small model-formula grammar shared by nuisance specs and structural laws.

A formula reads ``response ~ term + term ... [| A]``.  A term is a product
of variables joined by ``:``; ``a*b`` expands to ``a + b + a:b``.  The
intercept is included unless ``0`` or ``-1`` appears; ``-T`` suppresses the
automatic time index of pooled models.

Variables:

``A``           treatment arm (the component value being evaluated)
``aY``, ``aD``  treatment components (structural laws only)
``T``           interval index k of a pooled row (0..K)
``T_<j>``       indicator of interval j
``L0_<x>``      baseline covariate x
``L_<x>``       most recent value L_{k,x} of a time-varying covariate (0 at k=0)
``Lnow_<x>``    value L_{k+1,x} drawn earlier in the same interval
``L<j>_<x>``    value of x at time j
"""

import itertools
import re
from dataclasses import dataclass

from .errors import ConfigError

_VAR = re.compile(r"^(1|A|aY|aD|T|T_\d+|L0_\w+|L_\w+|Lnow_\w+|L\d+_\w+)$")
_FIXED_TIME = re.compile(r"^L(\d+)_(\w+)$")


def parse_term(term):
    parts = [p.strip() for p in term.split(":")]
    for p in parts:
        if not _VAR.match(p) or p == "1":
            raise ConfigError(f"unknown variable {p!r} in term {term!r}")
    return ":".join(parts)


def term_vars(term):
    return term.split(":")


def fixed_time(var):
    """Return (j, name) for an ``L<j>_<name>`` variable, else None."""
    if var.startswith("L0_") or var.startswith("Lnow_"):
        return None
    m = _FIXED_TIME.match(var)
    return (int(m.group(1)), m.group(2)) if m else None


def _expand(token):
    factors = [f.strip() for f in token.split("*")]
    if len(factors) == 1:
        return [parse_term(factors[0])]
    out = []
    for r in range(1, len(factors) + 1):
        for combo in itertools.combinations(factors, r):
            out.append(parse_term(":".join(combo)))
    return out


@dataclass(frozen=True)
class ModelSpec:
    response: str
    terms: tuple
    intercept: bool = True
    link: str = "logit"
    stratify_by_arm: bool = False
    auto_time: bool = True
    formula: str = ""

    @property
    def channel(self):
        return "L" if self.response.startswith("L_") else self.response

    @property
    def covariate(self):
        return self.response[2:] if self.response.startswith("L_") else None

    def columns(self):
        return (["1"] if self.intercept else []) + list(self.terms)

    def with_time(self, K):
        """Add the time index to a pooled model when K > 1 and it is absent."""
        if (self.channel in ("D", "C", "L") and self.auto_time and K > 1
                and not any(v == "T" or v.startswith("T_")
                            for t in self.terms for v in term_vars(t))):
            return ModelSpec(self.response, self.terms + ("T",), self.intercept, self.link,
                             self.stratify_by_arm, self.auto_time, self.formula)
        return self


def parse_formula(text):
    """Parse ``response ~ rhs [| A]`` into a ModelSpec."""
    if "~" not in text:
        raise ConfigError(f"formula {text!r} lacks '~'")
    lhs, rhs = text.split("~", 1)
    response = lhs.strip()
    if not re.match(r"^(D|C|Y|A|L_\w+)$", response):
        raise ConfigError(f"unknown response {response!r} in formula {text!r}")
    stratify = False
    if "|" in rhs:
        rhs, strat = rhs.split("|", 1)
        if strat.strip() != "A":
            raise ConfigError(f"only '| A' stratification is supported, got {strat.strip()!r}")
        stratify = True
    intercept, auto_time = True, True
    terms = []
    rhs = rhs.replace("-", "+-")
    for token in rhs.split("+"):
        token = re.sub(r"^-\s*", "-", token.strip())
        if not token:
            continue
        if token in ("0", "-1"):
            intercept = False
        elif token == "1":
            intercept = True
        elif token == "-T":
            auto_time = False
        elif token.startswith("-"):
            raise ConfigError(f"cannot remove term {token[1:]!r}")
        else:
            for t in _expand(token):
                if t not in terms:
                    terms.append(t)
    link = "identity" if response == "Y" else "logit"
    if stratify and response == "A":
        raise ConfigError("the treatment model cannot be stratified by arm")
    if stratify and any("A" in term_vars(t) for t in terms):
        raise ConfigError(f"formula {text!r} stratifies by A and also uses A as a term")
    return ModelSpec(response, tuple(terms), intercept, link, stratify, auto_time, text.strip())
