from setuptools import setup

with open("requirements.txt") as f:
    requirements = [line.strip() for line in f if line.strip() and not line.startswith("pytest")]

setup(
    name="speechmind",
    version="0.1.0",
    description="Desk-scale speech recognition inference and evaluation toolkit",
    py_modules=[
        "speech_agent_framework",
        "speech_audio",
        "speech_vocab",
        "speech_model",
        "speech_decoding",
        "speech_metrics",
        "subtitle_writers",
        "text_normalizer",
        "speechmind_cli",
    ],
    packages=["agents"],
    data_files=[("data", ["data/contractions.tsv", "data/spellings.tsv", "data/fillers.txt"])],
    install_requires=requirements,
    python_requires=">=3.9",
    entry_points={"console_scripts": ["speechmind=speechmind_cli:main"]},
)
