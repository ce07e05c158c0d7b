import logging

from agents.agent import Agent


class EchoAgent(Agent):
    name = "Echo Agent"
    color = Agent.CYAN


def test_log_prefixes_name_and_color(caplog):
    caplog.set_level(logging.DEBUG)
    agent = EchoAgent()
    agent.log("ready")
    agent.debug("details")
    first, second = caplog.records
    assert first.levelno == logging.INFO
    assert first.getMessage() == f"{Agent.BG_BLACK}{Agent.CYAN}[Echo Agent] ready{Agent.RESET}"
    assert second.levelno == logging.DEBUG


def test_warnings_and_errors_use_red_background(caplog):
    caplog.set_level(logging.DEBUG)
    agent = EchoAgent()
    agent.warning("careful")
    agent.error("broken")
    assert [record.levelno for record in caplog.records] == [logging.WARNING, logging.ERROR]
    assert all(record.getMessage().startswith(Agent.BG_RED) for record in caplog.records)


def test_timed_logs_even_when_the_block_raises(caplog):
    caplog.set_level(logging.INFO)
    agent = EchoAgent()
    try:
        with agent.timed("Scoring"):
            raise ValueError("stop")
    except ValueError:
        pass
    assert "[Echo Agent] Scoring took " in caplog.records[-1].getMessage()
