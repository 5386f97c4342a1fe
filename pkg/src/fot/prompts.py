"""Prompt templates for every pipeline stage.

Templates contain literal JSON braces, so rendering uses replacement of
uniquely named ``{slot}`` markers instead of ``str.format``.
"""

from __future__ import annotations

import re


def fill(template: str, **slots: str) -> str:
    """Substitute ``{name}`` markers in a single pass.

    Single-pass substitution keeps slot values that happen to contain
    marker-like text from being re-expanded. Every named slot must exist
    in the template.
    """

    for name in slots:
        if "{" + name + "}" not in template:
            raise KeyError(f"template has no slot {{{name}}}")
    pattern = re.compile("|".join(re.escape("{" + name + "}") for name in slots))
    return pattern.sub(lambda m: slots[m.group(0)[1:-1]], template)


# Agent side: solving with the broadcast library. With an empty library the
# solve prompt reduces to the bare problem instead.
SOLUTION_PROMPT = """\
Available Insights to Guide Your Solution:

{library}

---
INSTRUCTIONS: Review the insights above and actively apply the relevant techniques from insights to solve this problem. Consider which insights can help you approach the problem more effectively.

Problem: {problem}"""

BARE_PROBLEM_PROMPT = "Problem: {problem}"


REFLECTION_PROMPT = """\
Analyze the solution below to extract procedural knowledge that reflects the reasoning traces.

Problem:
{problem}

Step-by-Step Solution:
{solution}

Your task: Extract the fundamental techniques used in resolution that can be packaged as reasoning traces. Focus on:

1. What step-by-step procedures were used? How can these be repeated?
2. What conditions determined which approach to use? When should each technique apply?
3. What methods, strategies, or workflows can be applied to similar problems?
4. What made this approach effective? What should someone know to use it correctly?
5. What types of problems would benefit from these techniques?

Output your analysis covering:

### I. Procedural Knowledge
- Break down the solution into clear, repeatable procedures
- The extracted traces should be concrete solutions rather than general principles.

### II. Reusable Techniques and Methods
- List specific techniques, strategies, or workflows used
- The techniques should be solid on practical questions rather than very general and high-level principles.
- For each technique, identify:
  * When it should be used (conditions/triggers)
  * How it was applied (concrete steps)
  * Why it was effective (insights)
  * What problems it could solve (applicability)

### III. Critical Insights and Guidelines
- What key insights made this solution work?
- What common pitfalls should be avoided?
- What variations or edge cases should be considered?

Focus on extracting actionable, procedural knowledge that can be packaged as reusable insights for similar problems."""


TRACE_EXTRACTION_PROMPT = """\
Extract reasoning traces from the solution below. Analyze the solution and reflection to identify concrete, actionable traces so that similar problems can be solved via the traces

Problem: {problem}

Solution: {solution}

Reflection: {reflection}

**Your Task:**
Identify and extract all reusable reasoning traces, techniques, and methods used in the solution. Each trace should be a concrete procedure that can guide someone to solve similar problems.

**What Makes a Good Reasoning Trace:**
- A specific technique or method that was used in the solution.
- Something that can be applied to similar problems, not just this one.
- Includes guidance on when and how to use it with clear steps that can be followed if necessary.
- Not repetition of already well-known or commonly adopted techniques.
- Not too general and high-level but contains actionable procedural knowledge.

**Description Must Include:**
1. **Core idea**: The fundamental concept of what this trace is about. What is the main technique or method? What does it do?

2. **When to use**: Explain when this skill should be applied. What types of problems? What conditions must be met? What situations trigger this skill?

**Output Format (Simple JSON):**
Output a simple JSON object with skill names as keys and descriptions as string values:

{"trace_name": "description"}

Format Rules:
- Use valid JSON format
- Each trace name must start with "trace_"
- Keep JSON simple - no nested objects, just key-value pairs
- Escape quotes in descriptions with backslash: \\"

**Example:**
{
  "trace polynomialFactoring": "The major idea is how we can turn a polynomial into a product of simpler expressions. This skill is particularly useful for quadratic and higher-degree polynomial equations where factoring can simplify the problem. Factoring reduces complex polynomials to simpler equations. When solving equations with polynomial expressions that can be factored, especially when the polynomial has recognizable patterns like difference of squares (a^2-b^2), perfect square trinomials (a^2+2ab+b^2), or common factors.",
  "trace depthFirstSearchImplementation": "This algorithm is essential for problems involving path finding, cycle detection, topological sorting, connected components, or exploring all possible solutions in a search space. DFS explores depth before breadth, using stack-based recursion or explicit stack. It is memory-efficient for deep structures and naturally handles backtracking. The visited set prevents infinite loops and redundant work. DFS is the foundation for many graph algorithms including topological sort, strongly connected components, and maze solving. When you need to explore or traverse a graph, tree, or nested structure systematically, going as deep as possible before backtracking. Use DFS when you need to visit all nodes in a connected component, find paths between nodes, detect cycles, or explore recursive structures like file systems, nested data, or game states."
}

**Output your response as a valid JSON object only:**"""


PROFILE_PROMPT = """\
You are analyzing a collection of reasoning traces generated for problem-solving.  Understand their relationships and structure and build a profile of their relationships.

**Collected {trace_count} traces in total:**
Note: This collection includes ALL traces from all problems without deduplication. Similar names with different indices (e.g., _001, _002) represent different occurrences that may have variations in their descriptions.

{traces_text}

**Your Task:**
Analyze these traces and build a profile of their relationships:

1. **Identify Clusters**:
   Group related traces that share:
   - Resolve the same or similar problem
   - Similar approaches or techniques
   - Nearly identical traces (e.g., same trace with minor variations in description or parameters)
   - Traces in the same cluster should be highly similar.

2. **Build Trace Relationships**:
Record all important relationships - traces don't exist in isolation and build a relationship graph that records:
   - **Prerequisite relationships**: Traces that must be learned/used before others
   - **Composition relationships**: Traces that can be chained/composed together
   - **Alternative relationships**: Different approaches to the same problem
   - **Complementary relationships**: Traces that work better together than individually used
   - **Derivation relationships**: Traces derived from or based on others
   - **Similar relationships**: Traces that are similar but not identical
Map relationships between traces within clusters and across clusters.

# Output Format:
{
  "clusters": [
    {
      "cluster_id": 0,
      "cluster_name": "Domain/Theme Name",
      "traces": ["name1", "name2", "name3"],
      "theme": "What is the high-level technical idea of the traces in this cluster?"
    }
  ],
  "relationships": [
    {
      "trace_a": "trace_name1",
      "trace_b": "trace_name2",
      "relationship_type": "prerequisite/complementary/alternative/similar/derived_from/composes_with",
      "description": "How these traces relate to each other and Why"
    }
  ]
}

**Output your analysis as JSON only:**"""


LIBRARY_PROMPT = """\
**Your Task:**
You are extracting fundamental insights from a collection of problem-solving traces.

**Output Requirements (STRICT):**
1. Return EXACTLY one valid JSON object and nothing else.
2. Do NOT output markdown code fences.
3. Do NOT output explanations, notes, reasoning, prefixes, suffixes, or `<think>` content.
4. Do NOT output list/array at top-level.
5. Every key must start with "insight_".
6. Every value must be a single string.
7. No nested objects, no nested arrays.

**Required JSON shape:**
{
    "insight_name1": "description string",
    "insight_name2": "description string"
}

**Formatting Rules:**
- Use valid JSON syntax only.
- Keep top-level as key-value pairs only.
- Escape quotes in descriptions with backslash: \\"
- If uncertain, still output a valid JSON object (possibly with fewer insights), never free text.

Your goal is to extract a comprehensive set of fundamental, cross-domain insights that can be derived and applied beyond their original domain and meet the following requirements:
- Combine previous insights (if any): {previous_library} with new insights.
- Extract your insights based on all client reasoning traces: {traces_text}. These traces are derived from solving specific problems (bottom-up approach)
- Use clusters of reasoning traces: {clusters_text} to help organize.
- Use relationships between traces: {relationships_json} to help organization
- Your task is to extract multi-disciplinary, fundamental knowledge (top-down approach) which can be generalized to multi-domain problem-solving.
- The extracted insights should be able to DERIVE and GUIDE the use of the collected insights
- The extracted insights cannot be too general. They are not supposed to be knowledge which can be applied to any problem. They should be fundamental knowledge to particular several domains but specific.
- You should extract {insight_budget}. Not too few. Not too many. Do not over simplify or be too detailed.
- DO NOT over-merge insights.

Insights should have following properties:
1. **Extract Reusable Primitives**:
   - For EACH cluster, extract multiple fundamental insights capturing core essence and variations (DO NOT over-merge)
   - Identify cross-domain patterns that apply to multiple fields
   - Create reusable, composable primitives specific enough to be actionable

2. **Knowledge to include**:
   - **Fundamental Level**: Core principles underlying multiple domains
   - **General Level**: Broad techniques for related problem types
   - **Cross-Domain**: Insights transferable beyond origin field

3. **Preserve While Generalizing**:
   - Create fundamental versions that can guide/derive original insights
   - Maintain important variations rather than collapsing into single insight

4. **Description Format:**
   Each description is a single string containing:
   - What the insight is and how it solves problems
   - When to use: problem types, conditions, triggers (be comprehensive and specific)

**Example 1 - Transformer Architecture:**

Input reasoning traces:
- reasoning trace VisionTransformerImageClassification: "I need to classify medical X-ray images into disease categories. CNNs aren't working well - they can't capture relationships between distant regions like how fluid in the lower right lung might relate to heart enlargement. Let me try Vision Transformer (ViT). I'll divide each X-ray into 16x16 patches - a 224x224 image gives 196 patches. Each patch becomes like a token in NLP. I flatten each to a 256-dim vector. Since transformers don't know spatial positions, I add position embeddings so the model knows patch [0,0] is top-left. I prepend a [CLS] token to gather global info. Feeding through 12 transformer encoder layers - the self-attention lets every patch attend to every other patch directly, so patch [2,5] can look at patch [10,12] even though they're far apart spatially. This is exactly what I need! After 12 layers, I extract the [CLS] token and feed to MLP classifier. Training on 50k chest X-rays: 94.2"

- reasoning trace TransformerNextWordPrediction: "I'm building autocomplete for a text editor. The challenge: predict next word given arbitrary-length context. RNNs struggle with long sequences - the hidden state forgets earlier context. Let me use a transformer decoder. I tokenize 'The cat sat on the' using WordPiece -> tokens [254, 8901, 4523, 651, 278]. Convert each to 512-dim embedding and add positional encodings. Critical part: causal masking so the model can't cheat by seeing future words. When predicting token at position 4, it should only see 0-3. I implement lower-triangular attention mask. Processing through 6 decoder layers with masked self-attention. At position 4 ('the'), attention computes similarity between its query and keys of previous words. It attends strongly to 'sat' (0.8) and 'on' (0.7), weakly to 'cat' (0.2). Using 12 heads helps - different heads capture different patterns: head-2 learns syntax (preposition+article), head-5 learns semantics (actions+objects), head-8 learns long-range dependencies. After final layer, project last hidden state through 50k-dim softmax. For 'the': top predictions are 'mat' (0.73), 'floor' (0.12), 'rug' (0.08). Deployed in production - users accept top-3 suggestion 85% of the time, reducing typing by 40%. Transformer's self-attention captures context way better than RNN's sequential processing."

Output aggregated insight:
{
  "insight_transformerArchitecture": "This fundamental neural network architecture applies across natural language processing, computer vision, time series analysis, graph neural networks, and multi-modal learning. This insight is essential for modern AI applications including language models, image processing, code generation, and scientific computing. When you need to capture relationships between all elements simultaneously (self-attention), you're working with sequences of variable length, you need parallel processing of sequences, or when the problem involves understanding context and relationships. Details: 1) Design input representation - convert your data into embeddings (token embeddings for text, patch embeddings for images, node embeddings for graphs), add positional encodings to preserve sequence information, and prepare input for transformer blocks 2) Create models with transformer blocks 3) Apply task-specific architecture - use encoder-only for understanding (BERT, ViT), decoder-only for generation (GPT), or encoder-decoder for translation"
}

**Example 2 - Surface-Enhanced Raman Spectroscopy:**

Input reasoning traces:
- reasoning trace SERSMedicalDetectionR6G: "I need to detect cancer biomarkers in blood at incredibly low concentrations - 10^-12 M, like finding molecules in a swimming pool. ELISA only goes to 10^-9 M, not sensitive enough for early diagnosis. Let me try SERS - Surface-Enhanced Raman Spectroscopy. Metal nanoparticles create huge EM field enhancements. I synthesize 60nm gold nanoparticles via citrate reduction. At 785nm laser, these have plasmon resonance amplifying local field by ~10^6. But I need selectivity too - can't detect everything. So I functionalize the gold with anti-PSA antibodies for prostate cancer. When I add patient serum, only PSA proteins bind. Here's the clever part: I add R6G (Rhodamine 6G) reporter molecules. R6G has enormous Raman cross-section and when it sits in nanogaps between gold particles, field enhancement shoots to 10^8 or 10^10. Incubate 30 min for PSA binding, add R6G which sticks near bound PSA. Hit with 785nm laser at 5mW - I see characteristic R6G peaks at 1650, 1510, 1310 cm^-1. Peak intensity directly proportional to PSA amount. Integrate 60 sec for good SNR. Comparing to calibration: detecting PSA at 0.1 ng/mL - that's 10,000x more sensitive than ELISA! On clinical samples, detected prostate cancer 3-6 months earlier than conventional tests. The breakthrough: combining selective antibody recognition with SERS amplification gives single-molecule sensitivity while maintaining specificity."

- reasoning trace SERSPollutantDetection: "Monitoring river water for pesticides. EPA limit for malathion is 0.1 ppb but standard chromatography needs 1 ppb minimum. I need 10x better for early warning. SERS might work. Instead of spherical particles, I'll fabricate silver nanorod arrays - sharp tips create hotter hotspots than spheres. Using oblique angle deposition: 80nm nanorods with 4:1 aspect ratio on silicon. Gaps between rods only 5-10nm - perfect for trapping molecules. I calculate enhancement should hit 10^10 at 532nm. Collect river water, filter through 0.2um to remove debris and bacteria. Drop 50 uL onto nanorod substrate. During 5-min adsorption, pesticide molecules diffuse into nanogaps. Small gap means molecules guaranteed in enhancement zone (<10nm from metal). Rinse gently - removes interfering organics/salts but leaves adsorbed pesticides. Excite with 532nm at 2mW, matching silver plasmon peak. Even at 0.01 ppb malathion, clear peaks at 1440 cm^-1 (P=S stretch), 1080 cm^-1 (P-O-C), 640 cm^-1 (C-S). Measuring 1440 peak height vs calibration standards for quantification. Tested 50 river sites, cross-validated against LC-MS: R^2=0.97 correlation. Best part: do this in field with portable Raman - no lab needed. Real-time monitoring at 10x below regulatory limits. The nanorod geometry is critical - those sharp tips and tight gaps push enhancement to 10^10."

Output aggregated insight:
{
  "insight_surfaceEnhancedRamanSpectroscopy": "This powerful technique applies across analytical chemistry, materials science, biosensing, pharmaceutical analysis, environmental monitoring, and forensics. The technique achieves single-molecule sensitivity (10^6-10^11 enhancement) while providing molecular structural information through vibrational fingerprints. When to use: When you need ultra-sensitive detection below conventional analytical limits, when you want label-free molecular identification, when analyzing trace contaminants or biomarkers, or when field-portable real-time analysis is required. Common steps: 1) Prepare SERS-active substrate - synthesize plasmonic nanostructures (gold/silver nanoparticles, nanorods, nanostars) optimizing particle size (20-100 nm), shape, and inter-particle spacing (1-10 nm gaps) to maximize electromagnetic field enhancement at laser wavelength 2) Functionalize substrate if needed - modify metallic surface with antibodies, aptamers, or molecular recognition elements for selective analyte binding and improved specificity 3) Prepare and apply sample - process sample (filter, dilute, concentrate as needed), deposit onto SERS substrate via drop-casting or flow-through, allow adsorption time for molecules to enter hot spots (<10 nm from metal surface) 4) Select laser parameters - choose wavelength matching plasmon resonance (532, 633, or 785 nm), optimize power (0.1-10 mW) to avoid sample damage while maximizing signal 5) Acquire SERS spectrum - collect Raman scattered light with appropriate integration time, record vibrational spectrum showing characteristic molecular peaks 6) Analyze spectral fingerprint - identify molecules by comparing peak positions to reference spectra, quantify concentration from peak intensities using calibration curves, assess molecular orientation from peak ratios 7) Validate and control quality - average multiple spots for reproducibility, use internal standards, verify with orthogonal methods, consider substrate heterogeneity and enhancement factor variations"
}"""

#: Phrase in LIBRARY_PROMPT that the library-size sweep replaces with an
#: explicit quantity.
DEFAULT_INSIGHT_BUDGET = "proper number of insights"


JUDGE_PROMPT = """\
You are evaluating whether a research paper's proposed solutions are guided by or directly derived from insights in an encyclopedia.

Insights:
{insights}

Research Paper:
{paper_text}

Evaluation Criteria - An insight guides the paper ONLY IF ALL of the following are true:

1. CONCRETE METHODOLOGY USAGE: The insight's methodology or approach is concretely used in the paper's methods/approach section, not just theoretically relevant or mentioned in motivation.

2. METHODS SECTION PRESENCE: The insight must be related to how the paper actually implements its solution (methods, algorithms, techniques), not just in problem statement or related work.

3. COUNTERFACTUAL TEST: The paper's core contribution would fundamentally differ or fail without this insight. Ask: "If the authors didn't know this insight, could they still arrive at the same core solution?"

4. SPECIFICITY: The insight must specifically address a key challenge or component of the paper's solution, not just be generally applicable background knowledge.

Response Format:
- Respond ONLY in valid JSON with keys: guided (boolean), matched_insights (array of insight names)
- Set guided=true ONLY when at least one insight passes ALL criteria above
- Use only exact insight names from the Insights list above"""


# Per-domain problem templates appended to the raw benchmark question at
# ingestion time.
MATH_TEMPLATE = '\nSolve the problem step by step. Wrap your final answer in "\\boxed{}".'

SCIENCE_QA_TEMPLATE = """\


Please solve this graduate-level science question step by step.

Instructions:
1. Analyze the question carefully
2. Consider each option systematically
3. Explain your reasoning
4. Provide your final answer as a single letter (A, B, C, or D)
5. Wrap your final answer letter in \\boxed{}, for example: \\boxed{A}"""

CODING_TEMPLATE = """\


Please solve this programming problem by writing clean, efficient code.

Requirements:
1. Read the problem description carefully
2. Understand the input/output format
3. Write a complete solution
4. Include proper input/output handling
5. Wrap your final code solution in markdown code blocks with triple backticks (```)

Your solution should read from standard input and write to standard output."""

PAPER_READING_TEMPLATE = """\
Answer research question of the paper: {paper_name} based on paper content:{paper_content}
All papers need to be considered in the analysis."""

#: Nudge appended on the single JSON-parse retry.
JSON_RETRY_NUDGE = "\n\nOutput valid JSON only."
