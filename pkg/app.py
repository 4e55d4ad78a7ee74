"""
Defensibility Explorer - Gradio UI

Browse the letters of an experiment output directory: classify a letter,
watch the I-FGSM attack until it is misrecognized, compare the measured
defensibility with the regressor's estimate, and sample defensive letters
from the fine-tuned generator.

The directory comes from DEFLETTER_OUT_DIR (default runs/default).
Nothing is trained here.
"""

import logging
import os
from pathlib import Path

import gradio as gr
import numpy as np

from src.attack.ifgsm import AttackConfig, attack_trajectory
from src.classifier.checkpoint import load_classifier
from src.classifier.training import classify
from src.errors import DefletterError
from src.generator.cgan import generate, load_generator
from src.generator.evaluation import to_uint8
from src.glyphs.dataset import load_png_glyph
from src.glyphs.storage import load_dataset
from src.letters import LETTERS, letter_index, letter_name
from src.logging_setup import configure_logging, load_environment
from src.regression.regressor import estimate, load_regressor

load_environment()
configure_logging()
logger = logging.getLogger("defletter.app")


class Explorer:
    """Read-only view over the artifacts of one output directory."""

    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        self.classifier = self._load(load_classifier, "classifier/classifier.pt")
        self.dataset = self._load(load_dataset, "dataset/dataset.bin")
        self.generator = (self._load(load_generator, "gan-step2/generator.pt")
                          or self._load(load_generator, "gan-step1/generator.pt"))
        self.regressors = {}
        for letter in LETTERS:
            model = self._load(load_regressor, f"regressor/{letter}.pt", quiet=True)
            if model is not None:
                self.regressors[letter_index(letter)] = model

    def _load(self, loader, rel: str, quiet: bool = False):
        path = self.out_dir / rel
        if not path.is_file():
            if not quiet:
                logger.info("%s not found; the matching panel is disabled", path)
            return None
        return loader(path)

    def test_image(self, letter: str, index: int) -> np.ndarray:
        if self.dataset is None:
            raise gr.Error("No dataset in the output directory")
        images, labels, _ = self.dataset.subset("test")
        matches = np.nonzero(labels == letter_index(letter))[0]
        if matches.size == 0:
            raise gr.Error(f"No test image of class {letter}")
        return images[matches[int(index) % matches.size]]


explorer = Explorer(os.environ.get("DEFLETTER_OUT_DIR", "runs/default"))
logger.info("Explorer ready on %s", explorer.out_dir)


def inspect_letter(letter: str, index: float, upload: str | None, epsilon: float):
    """Classify, attack and estimate one letter image."""
    if explorer.classifier is None:
        raise gr.Error("No classifier in the output directory")
    image = load_png_glyph(Path(upload)) if upload else explorer.test_image(letter, int(index))
    label = letter_index(letter)
    logits, predicted = classify(explorer.classifier, image)
    summary = [f"Predicted: {letter_name(predicted)} (true {letter})"]

    frames = []
    if predicted != label:
        summary.append("Misrecognized before any attack; defensibility is undefined.")
    else:
        try:
            trajectory = attack_trajectory(explorer.classifier, image, label,
                                           AttackConfig(epsilon=epsilon))
        except DefletterError as exc:
            raise gr.Error(str(exc)) from exc
        k = len(trajectory) - 1
        final = trajectory[-1][1]
        if final == label:
            summary.append(f"Still recognized after {k} steps (censored).")
        else:
            summary.append(f"Defensibility k = {k} (misrecognized as {letter_name(final)})")
        frames = [(to_uint8(img), f"t={t}: {letter_name(p)}")
                  for t, (img, p) in enumerate(trajectory)]

    if label in explorer.regressors:
        summary.append(f"Regressor estimate: {estimate(explorer.regressors[label], image):.1f}")
    top = np.argsort(logits)[::-1][:3]
    summary.append("Top logits: " + ", ".join(f"{letter_name(c)} {logits[c]:.2f}" for c in top))
    return to_uint8(image), "\n".join(summary), frames


def sample_letters(letter: str, n: float, seed: float):
    if explorer.generator is None:
        raise gr.Error("No generator in the output directory")
    images = generate(explorer.generator, letter, int(n), int(seed))
    return [(to_uint8(img), f"{letter} #{i}") for i, img in enumerate(images)]


# Build the UI
with gr.Blocks(title="Defensibility Explorer", theme=gr.themes.Soft()) as app:
    gr.Markdown("""
    # Defensibility Explorer

    How many I-FGSM steps does it take before the classifier misreads a letter?
    """)

    with gr.Tabs():
        with gr.Tab("Inspect a letter"):
            with gr.Row():
                with gr.Column():
                    letter_input = gr.Dropdown(choices=list(LETTERS), value="A", label="Class")
                    index_input = gr.Number(value=0, precision=0, label="Test image index")
                    upload_input = gr.Image(type="filepath", label="...or upload a 64x64 PNG")
                    epsilon_input = gr.Slider(0.005, 0.1, value=0.02, step=0.005,
                                              label="Epsilon")
                    inspect_btn = gr.Button("Attack", variant="primary")

                with gr.Column():
                    image_output = gr.Image(label="Original", interactive=False)
                    summary_output = gr.Textbox(label="Result", lines=5, interactive=False)

            trajectory_output = gr.Gallery(label="Attack trajectory", columns=8)
            inspect_btn.click(
                fn=inspect_letter,
                inputs=[letter_input, index_input, upload_input, epsilon_input],
                outputs=[image_output, summary_output, trajectory_output]
            )

        with gr.Tab("Generate letters"):
            with gr.Row():
                gen_letter = gr.Dropdown(choices=list(LETTERS), value="A", label="Class")
                gen_n = gr.Slider(1, 32, value=8, step=1, label="How many")
                gen_seed = gr.Number(value=0, precision=0, label="Seed")
            gen_btn = gr.Button("Generate", variant="primary")
            gen_output = gr.Gallery(label="Generated letters", columns=8)
            gen_btn.click(fn=sample_letters, inputs=[gen_letter, gen_n, gen_seed],
                          outputs=[gen_output])

        with gr.Tab("About"):
            gr.Markdown(f"""
            Output directory: `{explorer.out_dir}`

            - Classifier: {"loaded" if explorer.classifier is not None else "not found"}
            - Regressors: {len(explorer.regressors)} of 26
            - Generator: {"loaded" if explorer.generator is not None else "not found"}

            Run `defletter run --config <file>.toml` to produce the artifacts.
            """)


if __name__ == "__main__":
    app.launch()
