"""Hand-built knowledge bases for exact simulator tests."""
from opendx.kbmodel import (
    DEMOGRAPHIC,
    SYMPTOM,
    Disease,
    DiseaseFindingLink,
    Finding,
    KnowledgeBase,
)


def hand_kb(disease_symptoms, n_symptoms, symptom_groups=(), ages=3, sexes=2):
    """``disease_symptoms``: per disease a list of (symptom index, level).

    Findings are laid out as ages, then sexes, then symptoms; symptom
    indices are relative to the first symptom.
    """
    findings, groups = [], []
    for n, tag in ((ages, "age"), (sexes, "sex")):
        if n:
            members = []
            for i in range(n):
                members.append(len(findings))
                findings.append(Finding(len(findings), f"{tag} {i}", DEMOGRAPHIC, len(groups)))
            groups.append(tuple(members))
    first = len(findings)
    gid_of = {}
    for g in symptom_groups:
        for s in g:
            gid_of[s] = len(groups)
        groups.append(tuple(first + s for s in g))
    for s in range(n_symptoms):
        findings.append(Finding(first + s, f"s{s}", SYMPTOM, gid_of.get(s)))
    diseases, links = [], []
    for d, syms in enumerate(disease_symptoms):
        diseases.append(Disease(d, f"d{d}", "very_common"))
        for s, level in syms:
            links.append(DiseaseFindingLink(d, first + s, level, 3))
    return KnowledgeBase(tuple(findings), tuple(diseases), tuple(links), tuple(groups)), first
