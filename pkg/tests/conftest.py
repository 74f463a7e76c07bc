import numpy as np
import pytest

from tagunify.tagspace import TagSet, parse_hierarchy

FIG3_HIERARCHY = """\
# OntoNotes-style coarse tags and i2b2-style fine tags
tagset onto: PERSON,GPE,ORG,DATE
tagset i2b2: DOCTOR,PATIENT,CITY,STATE,COUNTRY,HOSPITAL,ORGANIZATION,DATE
edge PERSON -> DOCTOR
edge PERSON -> PATIENT
open PERSON
edge GPE -> CITY
edge GPE -> STATE
edge GPE -> COUNTRY
edge ORG -> HOSPITAL
edge ORG -> ORGANIZATION
open ORG
"""


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def fig3():
    return parse_hierarchy(FIG3_HIERARCHY, name="fig3")


@pytest.fixture
def gpe_date():
    return TagSet("gpe", ("GPE",)), TagSet("date", ("DATE",))


def pytest_terminal_summary(terminalreporter):
    from _support import ACCEPTANCE
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
